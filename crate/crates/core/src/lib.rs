//! Tabular perceiver: latent-bottleneck cross-attention over embedded
//! categorical and piecewise-linear-encoded continuous features, with
//! single-task and uncertainty-weighted multitask training, clinical-style
//! evaluation metrics, and a reproducible experiment harness.

pub mod autodiff;
pub mod data;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod perceiver;
pub mod rng;

pub use error::{Error, Result};
