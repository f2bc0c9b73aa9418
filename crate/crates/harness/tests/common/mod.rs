#![allow(dead_code)]

use std::path::Path;

use aetransfer::config::{ExperimentConfig, ModelEntry};
use aetransfer_core::crypto::Transform;
use aetransfer_core::model::Architecture;

/// Seconds-scale budgets: tiny data, one epoch, a few attack iterations.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train = 200;
    cfg.data.test = 60;
    cfg.data.attack_images = 6;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 32;
    cfg.attack.apgd_iterations = 4;
    cfg.attack.fab_iterations = 4;
    cfg.attack.square_queries = 10;
    cfg.attack.target_classes = 2;
    cfg.attack.chunk = 4;
    cfg.run.seed = 7;
    cfg.run.out = out.to_path_buf();
    cfg
}

pub fn with_roster(mut cfg: ExperimentConfig, models: Vec<ModelEntry>, sources: &[&str], targets: &[&str]) -> ExperimentConfig {
    cfg.models = models;
    cfg.grid.sources = sources.iter().map(|s| s.to_string()).collect();
    cfg.grid.targets = targets.iter().map(|s| s.to_string()).collect();
    cfg
}

pub fn plain() -> ModelEntry {
    ModelEntry::plain("plain", Architecture::CnnSmall)
}

pub fn encrypted(name: &str, t: Transform, m: usize) -> ModelEntry {
    ModelEntry::encrypted(name, Architecture::CnnSmall, t, m, 0)
}
