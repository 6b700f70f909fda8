//! Probabilistic displacement registration driven by learned point sets.

pub mod autodiff;
pub mod error;
pub mod features;
pub mod interp;
pub mod matching;
pub mod metrics;
pub mod mrf;
pub mod pipeline;
pub mod points;
pub mod predictor;
pub mod volume;

pub use error::{Error, Result};
