use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::classifier::{Classifier, TrainingSummary};
use super::data::{augment, images_to_tensor, LabeledImages};
use super::network::{INPUT, LOSS, TARGETS};
use super::spec::ModelSpec;
use super::ModelError;
use super::network::ParamStore;
use crate::autodiff::{Adam, AutodiffError, Bindings, Gradients, Session, Sgd};
use crate::crypto::EncryptionKey;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the initial rate to zero over all steps.
    Cosine,
    /// Multiply by `factor` every `every` epochs.
    Step { every: usize, factor: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Heavy-ball momentum SGD using `momentum`.
    Sgd,
    /// Adam with betas (0.9, 0.999) and eps 1e-8; weight decay is decoupled.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr: f32,
    pub schedule: LrSchedule,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Zero-padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
    /// Linear learning-rate ramp over this many initial epochs.
    pub warmup_epochs: usize,
    /// Rescale each step's gradients to at most this global l2 norm.
    pub grad_clip: Option<f32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            optimizer: Optimizer::Adam,
            lr: 2e-3,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            crop_pad: 4,
            flip: true,
            warmup_epochs: 0,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(ModelError::InvalidConfig("lr >= 0, 0 <= momentum < 1, weight_decay >= 0 required".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(ModelError::InvalidConfig("grad_clip must be > 0".into()));
        }
        if let LrSchedule::Step { every: 0, .. } = self.schedule {
            return Err(ModelError::InvalidConfig("step schedule needs every >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate for global step `step` (0-based) of `total_steps`.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize, total_steps: usize) -> f32 {
        let epoch = step / steps_per_epoch.max(1);
        let warmup = self.warmup_epochs * steps_per_epoch;
        let ramp = if step < warmup { (step + 1) as f32 / warmup as f32 } else { 1.0 };
        ramp * match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = step as f64 / total_steps.max(1) as f64;
                (self.lr as f64 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))) as f32
            }
            LrSchedule::Step { every, factor } => self.lr * libm::powf(factor, (epoch / every) as f32),
        }
    }
}

/// Statistics reported after each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    pub running_accuracy: f32,
    /// Mean gradient l2 norm before clipping.
    pub mean_grad_norm: f32,
    /// Rate used by the epoch's last step.
    pub lr: f32,
}

enum Opt {
    Sgd(Sgd),
    Adam(Adam),
}

impl Opt {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f32) -> Result<(), AutodiffError> {
        match self {
            Opt::Sgd(o) => o.step(params, grads, lr),
            Opt::Adam(o) => o.step(params, grads, lr),
        }
    }
}

pub fn train(
    spec: ModelSpec,
    train_set: &LabeledImages,
    eval_set: Option<&LabeledImages>,
    cfg: &TrainConfig,
    key: Option<EncryptionKey>,
) -> Result<Classifier, ModelError> {
    train_with_progress(spec, train_set, eval_set, cfg, key, &mut |_| {})
}

/// Trains from the seeded initialization. With a key, every (augmented)
/// image is encrypted before the forward pass. Fully determined by `cfg.seed`.
pub fn train_with_progress(
    spec: ModelSpec,
    train_set: &LabeledImages,
    eval_set: Option<&LabeledImages>,
    cfg: &TrainConfig,
    key: Option<EncryptionKey>,
    progress: &mut dyn FnMut(EpochStats),
) -> Result<Classifier, ModelError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let k = spec.num_classes;
    if let Some(&bad) = train_set.labels().iter().find(|&&l| l >= k) {
        return Err(ModelError::LabelOutOfRange { label: bad, classes: k });
    }
    let mut model = Classifier::init(spec, rng::derive(cfg.seed, &[rng::label("init")]), key)?;
    let mut opt = match cfg.optimizer {
        Optimizer::Sgd => Opt::Sgd(Sgd::new(cfg.momentum, cfg.weight_decay)?),
        Optimizer::Adam => Opt::Adam(Adam::new(0.9, 0.999, 1e-8, cfg.weight_decay)?),
    };
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let graph = model.network().training_graph().clone();
    let loss_node = graph.output_id(LOSS).expect("loss output");
    let logits_node = graph.output_id(super::network::LOGITS).expect("logits output");
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::label("shuffle"), epoch as u64]));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut norm_sum = 0.0f64;
        let mut lr = cfg.lr;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut aug_rng = rng::stream(cfg.seed, &[rng::label("augment"), epoch as u64, b as u64]);
            let augmented: Vec<_> = chunk
                .iter()
                .map(|&i| augment(&train_set.images()[i], cfg.crop_pad, cfg.flip, &mut aug_rng))
                .collect();
            let x = model.network_input(&images_to_tensor(&augmented)?)?;
            let mut targets = vec![0.0f32; chunk.len() * k];
            for (row, &i) in chunk.iter().enumerate() {
                targets[row * k + train_set.labels()[i]] = 1.0;
            }
            let targets = Tensor::new(vec![chunk.len(), k], targets)?;
            let mut bindings = Bindings::new();
            bindings.bind(INPUT, &x, false).bind(TARGETS, &targets, false);
            for (name, t) in model.params() {
                bindings.bind(name, t, true);
            }
            let mut session = Session::new(&graph);
            session.eval(&bindings).map_err(|e| ModelError::Diverged {
                epoch,
                reason: alloc::format!("{e}"),
            })?;
            let loss = session.value(loss_node)?.item().expect("scalar loss");
            loss_sum += loss as f64 * chunk.len() as f64;
            let logits = session.value(logits_node)?;
            correct += logits
                .data()
                .chunks_exact(k)
                .zip(chunk)
                .filter(|(row, &i)| super::loss::argmax(row) == train_set.labels()[i])
                .count();
            let mut grads = session.backward(loss_node)?;
            drop(session);
            drop(bindings);
            norm_sum += match cfg.grad_clip {
                Some(clip) => grads.clip_global_norm(clip),
                None => grads.global_norm(),
            } as f64;
            lr = cfg.lr_at(step, steps_per_epoch, total_steps);
            opt.step(model.params_mut(), &grads, lr)?;
            step += 1;
        }
        progress(EpochStats {
            epoch,
            mean_loss: (loss_sum / n as f64) as f32,
            running_accuracy: correct as f32 / n as f32,
            mean_grad_norm: (norm_sum / steps_per_epoch as f64) as f32,
            lr,
        });
    }
    let batch = cfg.batch_size.max(256);
    let summary = TrainingSummary {
        epochs: cfg.epochs,
        train_accuracy: Some(model.accuracy(train_set, batch)?),
        test_accuracy: match eval_set {
            Some(e) if !e.is_empty() => Some(model.accuracy(e, batch)?),
            _ => None,
        },
    };
    model.set_summary(summary);
    Ok(model)
}
