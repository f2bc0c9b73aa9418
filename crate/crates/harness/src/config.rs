//! Experiment configuration, read from TOML. Every field has a default, and
//! the fully resolved configuration is written into each run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aetransfer_core::attack::{AttackConfig, AttackKind};
use aetransfer_core::crypto::{EncryptionKey, Transform};
use aetransfer_core::metrics::{AsrMode, ModelTag};
use aetransfer_core::model::{Architecture, LrSchedule, ModelSpec, Optimizer, TrainConfig};
use aetransfer_core::rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding the CIFAR-10 binary batches; synthetic data is used
    /// when unset or missing.
    pub path: Option<PathBuf>,
    pub train: usize,
    pub test: usize,
    /// The first `attack_images` test images are attacked.
    pub attack_images: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            train: 5000,
            test: 1000,
            attack_images: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Constant,
    Cosine,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub lr: f32,
    pub schedule: ScheduleName,
    pub step_every: usize,
    pub step_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub crop_pad: usize,
    pub flip: bool,
    pub warmup_epochs: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f32,
    /// Per-architecture replacements, keyed by architecture name.
    pub arch: BTreeMap<String, TrainOverride>,
}

/// Settings that replace the shared `[train]` values for one architecture.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            optimizer: match d.optimizer {
                Optimizer::Sgd => OptimizerName::Sgd,
                Optimizer::Adam => OptimizerName::Adam,
            },
            lr: d.lr,
            schedule: ScheduleName::Cosine,
            step_every: 10,
            step_factor: 0.1,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            crop_pad: d.crop_pad,
            flip: d.flip,
            warmup_epochs: d.warmup_epochs,
            grad_clip: d.grad_clip.unwrap_or(0.0),
            arch: BTreeMap::from([(
                Architecture::VitTiny.to_string(),
                TrainOverride {
                    lr: Some(1e-3),
                    warmup_epochs: Some(2),
                },
            )]),
        }
    }
}

impl TrainSection {
    /// The shared settings with the overrides for `arch` applied.
    pub fn for_architecture(&self, arch: Architecture) -> TrainSection {
        let mut out = self.clone();
        if let Some(o) = self.arch.get(arch.as_str()) {
            out.lr = o.lr.unwrap_or(out.lr);
            out.warmup_epochs = o.warmup_epochs.unwrap_or(out.warmup_epochs);
        }
        out
    }

    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: match self.optimizer {
                OptimizerName::Sgd => Optimizer::Sgd,
                OptimizerName::Adam => Optimizer::Adam,
            },
            lr: self.lr,
            schedule: match self.schedule {
                ScheduleName::Constant => LrSchedule::Constant,
                ScheduleName::Cosine => LrSchedule::Cosine,
                ScheduleName::Step => LrSchedule::Step {
                    every: self.step_every,
                    factor: self.step_factor,
                },
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            crop_pad: self.crop_pad,
            flip: self.flip,
            warmup_epochs: self.warmup_epochs,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Attacks run against every source, by name (`APGD-ce`, `APGD-t`,
    /// `FAB-t`, `Square`).
    pub kinds: Vec<String>,
    /// l∞ radius in 8-bit steps (ε = epsilon_255 / 255).
    pub epsilon_255: f32,
    pub apgd_iterations: usize,
    pub fab_iterations: usize,
    pub square_queries: usize,
    pub restarts: usize,
    pub target_classes: usize,
    pub apgd_alpha: f32,
    pub apgd_rho: f32,
    pub fab_alpha_max: f32,
    pub fab_beta: f32,
    pub fab_eta: f32,
    pub square_p_init: f32,
    /// Images per work unit; results do not depend on it.
    pub chunk: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::new(AttackKind::ApgdCe);
        AttackSection {
            kinds: AttackKind::ALL.iter().map(|k| k.to_string()).collect(),
            epsilon_255: 8.0,
            apgd_iterations: 100,
            fab_iterations: 100,
            square_queries: 1000,
            restarts: d.n_restarts,
            target_classes: d.n_target_classes,
            apgd_alpha: d.apgd_alpha,
            apgd_rho: d.apgd_rho,
            fab_alpha_max: d.fab_alpha_max,
            fab_beta: d.fab_beta,
            fab_eta: d.fab_eta,
            square_p_init: d.square_p_init,
            chunk: 16,
        }
    }
}

impl AttackSection {
    pub fn kinds(&self) -> Result<Vec<AttackKind>, ConfigError> {
        let mut out = Vec::new();
        for k in &self.kinds {
            let kind: AttackKind = k.parse().map_err(|e| ConfigError::Invalid(format!("{e}")))?;
            if out.contains(&kind) {
                return Err(ConfigError::Invalid(format!("attack `{k}` listed twice")));
            }
            out.push(kind);
        }
        Ok(out)
    }

    pub fn to_config(&self, kind: AttackKind, seed: u64) -> AttackConfig {
        AttackConfig {
            kind,
            epsilon: self.epsilon_255 / 255.0,
            n_iter: match kind {
                AttackKind::ApgdCe | AttackKind::ApgdT => self.apgd_iterations,
                AttackKind::FabT => self.fab_iterations,
                AttackKind::Square => self.square_queries,
            },
            n_restarts: self.restarts,
            n_target_classes: self.target_classes,
            seed,
            apgd_alpha: self.apgd_alpha,
            apgd_rho: self.apgd_rho,
            fab_alpha_max: self.fab_alpha_max,
            fab_beta: self.fab_beta,
            fab_eta: self.fab_eta,
            square_p_init: self.square_p_init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AsrModeName {
    #[default]
    Formula,
    /// Non-default: also require the AE to fool the source model.
    RequireSourceSuccess,
}

impl From<AsrModeName> for AsrMode {
    fn from(m: AsrModeName) -> Self {
        match m {
            AsrModeName::Formula => AsrMode::Formula,
            AsrModeName::RequireSourceSuccess => AsrMode::RequireSourceSuccess,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; data subsets, keys, initializations and attack streams
    /// are all derived from it.
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub out: PathBuf,
    pub asr_mode: AsrModeName,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            workers: 1,
            out: PathBuf::from("runs"),
            asr_mode: AsrModeName::Formula,
        }
    }
}

/// One classifier in the roster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub architecture: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    /// Index of the key drawn for this (transform, block size); models with
    /// equal indices share a key.
    #[serde(default)]
    pub key_index: u32,
}

impl ModelEntry {
    pub fn plain(name: &str, arch: Architecture) -> Self {
        ModelEntry {
            name: name.into(),
            architecture: arch.to_string(),
            transform: None,
            block_size: None,
            key_index: 0,
        }
    }

    pub fn encrypted(name: &str, arch: Architecture, t: Transform, m: usize, key_index: u32) -> Self {
        ModelEntry {
            name: name.into(),
            architecture: arch.to_string(),
            transform: Some(t.to_string()),
            block_size: Some(m),
            key_index,
        }
    }

    pub fn architecture(&self) -> Result<Architecture, ConfigError> {
        self.architecture
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("model `{}`: {e}", self.name)))
    }

    pub fn spec(&self) -> Result<ModelSpec, ConfigError> {
        Ok(ModelSpec::new(self.architecture()?))
    }

    pub fn transform(&self) -> Result<Option<Transform>, ConfigError> {
        self.transform
            .as_deref()
            .map(|t| t.parse().map_err(|e| ConfigError::Invalid(format!("model `{}`: {e}", self.name))))
            .transpose()
    }

    /// The key is a function of the master seed, transform, block size and
    /// key index only.
    pub fn key(&self, master_seed: u64) -> Result<Option<EncryptionKey>, ConfigError> {
        let Some(t) = self.transform()? else {
            if self.block_size.is_some() {
                return Err(ConfigError::Invalid(format!("model `{}` has a block size but no transform", self.name)));
            }
            return Ok(None);
        };
        let m = self
            .block_size
            .ok_or_else(|| ConfigError::Invalid(format!("model `{}` needs a block_size", self.name)))?;
        let labels = [rng::label("key"), rng::label(t.as_str()), m as u64, self.key_index as u64];
        let hi = rng::derive(master_seed, &labels) as u128;
        let lo = rng::derive(hi as u64, &labels) as u128;
        EncryptionKey::new(hi << 64 | lo, t, m)
            .map(Some)
            .map_err(|e| ConfigError::Invalid(format!("model `{}`: {e}", self.name)))
    }

    pub fn tag(&self) -> Result<ModelTag, ConfigError> {
        Ok(ModelTag {
            name: self.name.clone(),
            transform: self.transform()?,
            block_size: self.block_size,
        })
    }

    /// Training seed, independent of the model's display name.
    pub fn train_seed(&self, master_seed: u64) -> Result<u64, ConfigError> {
        let t = self.transform()?.map_or(0, |t| rng::label(t.as_str()));
        Ok(rng::derive(
            master_seed,
            &[
                rng::label("train"),
                rng::label(&self.architecture),
                t,
                self.block_size.unwrap_or(0) as u64,
                self.key_index as u64,
            ],
        ))
    }
}

/// Which roster models are attacked (sources) and evaluated (targets).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub run: RunSection,
    pub grid: GridSection,
    pub models: Vec<ModelEntry>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn model(&self, name: &str) -> Result<&ModelEntry, ConfigError> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| ConfigError::Invalid(format!("no model named `{name}` in the roster")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.data.train == 0 || self.data.test == 0 {
            return bad("data.train and data.test must be >= 1".into());
        }
        if self.data.attack_images > self.data.test {
            return bad("data.attack_images cannot exceed data.test".into());
        }
        if self.attack.chunk == 0 {
            return bad("attack.chunk must be >= 1".into());
        }
        self.train
            .to_config(0)
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        for name in self.train.arch.keys() {
            let arch: Architecture = name.parse().map_err(|e| ConfigError::Invalid(format!("train.arch.{name}: {e}")))?;
            self.train
                .for_architecture(arch)
                .to_config(0)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("train.arch.{name}: {e}")))?;
        }
        for kind in self.attack.kinds()? {
            self.attack
                .to_config(kind, 0)
                .validate(10)
                .map_err(|e| ConfigError::Invalid(format!("attack: {e}")))?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if !seen.insert(m.name.as_str()) {
                return bad(format!("model `{}` listed twice", m.name));
            }
            m.architecture()?;
            if let Some(bs) = m.block_size {
                if ![4, 8, 16].contains(&bs) {
                    log::warn!("model `{}` uses block size {bs}; the studied sizes are 4, 8 and 16", m.name);
                }
            }
            m.key(self.run.seed)?;
        }
        for n in self.grid.sources.iter().chain(&self.grid.targets) {
            self.model(n)?;
        }
        Ok(())
    }
}
