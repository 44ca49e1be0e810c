//! Decision transformer: configuration, model, window sampling, training
//! and return-conditioned rollouts.

pub mod batch;
pub mod config;
pub mod model;
pub mod rollout;
pub mod train;

pub use batch::{sample_batch, TrainBatch, TrainingSet};
pub use config::DtConfig;
pub use model::{layer_names, DecisionTransformer, DtInput, NamedLayer};
pub use rollout::{decrement_rtg, rollout, rollout_batch, RolloutLog};
pub use train::{batch_loss, dataset_loss, run_steps, train, train_with};
