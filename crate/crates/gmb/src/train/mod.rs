//! Supervised training of the MIL model.
//!
//! Two-head cross-entropy on ordinal pattern codes, exact gradients
//! through the full network, a decoupled-weight-decay adaptive optimizer,
//! per-WSI minibatches with gradient accumulation, a confounder
//! decorrelating epoch sampler, early stopping on held-out ISUP agreement,
//! and cross-validation producing a model ensemble.

mod adamw;
mod backward;
mod fold;
mod loss;
mod sampler;

pub use adamw::{optimizer_step, AdamWState};
pub use backward::backward;
pub use fold::{
    train_cv, train_fold, write_training_log, BagLoader, EnsembleCheckpoint, EpochLog, FoldMeta,
    FoldOutcome,
};
pub use loss::{bag_loss, compute_loss};
pub use sampler::epoch_sample;

use serde::{Deserialize, Serialize};

use crate::manifest::ManifestError;
use crate::model::ModelError;
use crate::stats::StatsError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tile(#[from] crate::tile::TileError),
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("fold {fold} failed: {source}")]
    FoldFailed {
        fold: u32,
        #[source]
        source: Box<TrainError>,
    },
    #[error("training data: {0}")]
    Data(String),
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    1e-2
}
fn default_accumulation_interval() -> u32 {
    4
}
fn default_effective_batch() -> u32 {
    32
}
fn default_max_patches() -> usize {
    1800
}
fn default_patience() -> u32 {
    200
}
fn default_max_epochs() -> u32 {
    1000
}

/// Optimizer and loop hyperparameters. The defaults are the production
/// values; desk-scale runs override `patience_epochs` and `max_epochs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_accumulation_interval")]
    pub accumulation_interval: u32,
    #[serde(default = "default_effective_batch")]
    pub effective_batch_wsis: u32,
    #[serde(default = "default_max_patches")]
    pub max_patches_per_wsi: usize,
    #[serde(default = "default_patience")]
    pub patience_epochs: u32,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: u32,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            accumulation_interval: default_accumulation_interval(),
            effective_batch_wsis: default_effective_batch(),
            max_patches_per_wsi: default_max_patches(),
            patience_epochs: default_patience(),
            max_epochs: default_max_epochs(),
            seed: 0,
        }
    }
}
