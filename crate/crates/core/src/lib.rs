//! Contrastive adapter training on a desk-scale conditional diffusion model.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
