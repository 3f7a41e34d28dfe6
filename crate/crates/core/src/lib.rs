//! Hypergraph spatio-temporal forecasting with prediction-error anomaly detection.

pub mod dataio;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod graphconv;
pub mod hypergraph;
pub mod masking;
pub mod model;
pub mod tcn;
pub mod numerics;
pub mod params;

pub use error::{Error, Result};
