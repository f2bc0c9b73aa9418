//! Classifiers: architectures, training, prediction, input gradients and
//! checkpoints.

mod checkpoint;
mod classifier;
mod data;
pub mod loss;
mod network;
mod spec;
mod train;

#[cfg(test)]
mod tests;

use alloc::string::String;
use alloc::vec::Vec;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use classifier::{Classifier, InputGradient, Prediction, TrainingSummary};
pub use data::{augment, images_to_tensor, LabeledImages};
pub use loss::LossKind;
pub use network::{Network, ParamStore, INPUT, LOGITS, LOSS, TARGETS};
pub use spec::{Architecture, ModelSpec, NetworkDef};
pub use train::{train, train_with_progress, EpochStats, LrSchedule, Optimizer, TrainConfig};

use crate::autodiff::AutodiffError;
use crate::crypto::CryptoError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} is outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("input shape {got:?} does not match {expected:?} (0 = any batch size)")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}
