//! Central finite differences, used as an independent oracle for the tape.

use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; gradients whose combined norm
/// is below it are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` with respect to every entry of every tensor in
/// `inputs`, using `(f(x+h) - f(x-h)) / 2h`. Inputs are restored afterwards.
pub fn numerical_gradient<F>(inputs: &mut [Tensor], step: f64, mut f: F) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + step;
            let plus = f(inputs);
            inputs[k].data_mut()[i] = orig - step;
            let minus = f(inputs);
            inputs[k].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        out.push(Tensor::new(inputs[k].shape().to_vec(), g).expect("same shape"));
    }
    out
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / (analytic.norm() + numeric.norm()).max(NORM_FLOOR)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Graph;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inputs = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)];
        let weights = random(&mut rng, 3, 2);
        let loss = |ins: &[Tensor], g: &mut Graph| {
            let a = g.leaf(ins[0].clone(), true);
            let b = g.leaf(ins[1].clone(), true);
            let w = g.constant(weights.clone());
            let p = g.matmul(a, b).unwrap();
            let q = g.mul(p, w).unwrap();
            let s = g.sum_all(q);
            (a, b, s)
        };
        let mut g = Graph::new();
        let (a, b, s) = loss(&inputs, &mut g);
        let grads = g.backward(s).unwrap();
        let numeric = numerical_gradient(&mut inputs, DEFAULT_STEP, |ins| {
            let mut g = Graph::no_grad();
            let (_, _, s) = loss(ins, &mut g);
            g.value(s).item()
        });
        assert!(relative_error(&grads.get(a).unwrap(), &numeric[0]) < 1e-6);
        assert!(relative_error(&grads.get(b).unwrap(), &numeric[1]) < 1e-6);
    }

    #[test]
    fn sum_of_linear_map_has_outer_product_gradient() {
        // loss = Σ (x·W); dL/dW[i][j] = x[i]
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 1, 5);
        let mut inputs = vec![random(&mut rng, 5, 3)];
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.leaf(inputs[0].clone(), true);
        let y = g.matmul(xv, w).unwrap();
        let s = g.sum_all(y);
        let analytic = g.backward(s).unwrap().get(w).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert!((analytic.get(i, j) - x.data()[i]).abs() < 1e-15);
            }
        }
        let numeric = numerical_gradient(&mut inputs, DEFAULT_STEP, |ins| {
            let mut g = Graph::no_grad();
            let xv = g.constant(x.clone());
            let w = g.constant(ins[0].clone());
            let y = g.matmul(xv, w).unwrap();
            let s = g.sum_all(y);
            g.value(s).item()
        });
        assert!(relative_error(&analytic, &numeric[0]) < 1e-5);
    }
}
