//! Synthetic data, base pretraining, experiment configuration and reports.

pub mod config;
pub mod data;
pub mod experiment;
pub mod pretrain;
pub mod report;

pub use config::{DatasetSection, ExperimentConfig, ExperimentSection, WithoutToken};
pub use data::{gen_dataset, gen_dataset_with, DatasetKind, DatasetSpec, IdentityConcept, SyntheticDataset};
pub use experiment::{median, train_encoder, ConceptScore, Experiment, MultiConceptResult, RunResult, RunSpec};
pub use pretrain::{generate, pretrain_base, PretrainConfig};
pub use report::{
    evaluate_batch, finetune_batch, open_experiment, pretrain_to_dir, run_batch, run_experiment, run_multiconcept,
    sweep_alpha, BatchOutcome, SweepRow,
};
