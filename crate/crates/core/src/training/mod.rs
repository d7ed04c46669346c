//! Fine-tuning objectives and the four adaptation regimes: plain low-rank
//! adapters, contrastive adapter training, prior preservation with a
//! self-generated regularization set, and trigger-embedding optimization.

mod config;
mod loss;
mod trainer;

pub use config::{ContrastivePolicy, IdentityDataset, Mode, StepRecord, TrainConfig, TrainLog};
pub use loss::{cat_loss, ldm_loss, prior_preservation_loss};
pub use trainer::{generate_regularization_set, train_adapter, LossBatch, LossGraph, RegularizationSet, TrainOutput};

use crate::error::Result;
use crate::model::BaseModel;
use crate::rng::Rng;

/// Registers a trigger for `class`-like samples on `base` and wraps them as
/// a single-concept dataset. The trigger starts at the class embedding plus
/// `noise_std` Gaussian noise.
pub fn register_identity(
    base: &mut BaseModel,
    name: &str,
    class: usize,
    samples: Vec<Vec<f64>>,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<IdentityDataset> {
    let trigger = base.conditions.register_trigger(name, class, noise_std, rng)?;
    IdentityDataset::new(samples, trigger, Some(class))
}
