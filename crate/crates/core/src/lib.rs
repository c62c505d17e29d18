//! Conformer-ensemble message-passing networks for molecular property
//! prediction.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode gradient tape.
//! * [`data`]: molecule records, ingestion and filtering, scaffold splits,
//!   balanced sampling.
//! * [`featurize`]: atom and bond one-hot features, distance expansion,
//!   neighbor lists, WHIM-lite shape descriptors.
//! * [`models`]: the 2D and 3D message-passing fingerprinters and the readout.
//! * [`pool`]: statistical-weight-aware attention over conformers and the
//!   average-distance effective conformer.
//! * [`network`]: a full predictor assembled from the pieces above.
//! * [`train`], [`metrics`], [`analysis`]: optimization, screening metrics,
//!   and the attention-selection similarity study.
//! * [`config`]: the TOML run configuration used by the command-line tool.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod featurize;
pub mod io;
pub mod metrics;
pub mod models;
pub mod network;
pub mod params;
pub mod pool;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
