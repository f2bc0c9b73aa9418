//! l∞-bounded evasion attacks: APGD with cross-entropy or targeted DLR loss,
//! targeted FAB and Square.
//!
//! Attacks work on a chunk of images at a time. Every random draw comes from a
//! stream keyed by the master seed and the image's global index, so splitting a
//! batch into chunks (and running chunks in parallel) never changes results as
//! long as chunk boundaries are fixed.

mod apgd;
mod fab;
mod square;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::model::{loss, Classifier, ModelError};
use crate::tensor::Tensor;

pub use fab::project_linf_halfspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    ApgdCe,
    ApgdT,
    FabT,
    Square,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::ApgdCe, AttackKind::ApgdT, AttackKind::FabT, AttackKind::Square];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::ApgdCe => "APGD-ce",
            AttackKind::ApgdT => "APGD-t",
            AttackKind::FabT => "FAB-t",
            AttackKind::Square => "Square",
        }
    }

    pub fn needs_gradients(self) -> bool {
        self != AttackKind::Square
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect();
        match norm.as_str() {
            "apgdce" => Ok(AttackKind::ApgdCe),
            "apgdt" => Ok(AttackKind::ApgdT),
            "fabt" => Ok(AttackKind::FabT),
            "square" => Ok(AttackKind::Square),
            _ => Err(AttackError::InvalidConfig(alloc::format!("unknown attack `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0} needs input gradients, which this model cannot provide; attack it with Square instead")]
    GradientUnavailable(AttackKind),
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
}

/// Attack hyperparameters. The non-budget fields keep their published
/// defaults unless a caller has a reason to change them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// l∞ radius on the `[0,1]` scale.
    pub epsilon: f32,
    /// Iterations per run (APGD, FAB) or query budget (Square).
    pub n_iter: usize,
    pub n_restarts: usize,
    pub n_target_classes: usize,
    pub seed: u64,
    /// APGD momentum weight.
    pub apgd_alpha: f32,
    /// APGD fraction of successful steps required between checkpoints.
    pub apgd_rho: f32,
    pub fab_alpha_max: f32,
    pub fab_beta: f32,
    pub fab_eta: f32,
    /// Square initial patch area fraction.
    pub square_p_init: f32,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        AttackConfig {
            kind,
            epsilon: 8.0 / 255.0,
            n_iter: 100,
            n_restarts: 1,
            n_target_classes: 9,
            seed: 0,
            apgd_alpha: 0.75,
            apgd_rho: 0.75,
            fab_alpha_max: 0.1,
            fab_beta: 0.9,
            fab_eta: 1.05,
            square_p_init: 0.8,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if self.n_restarts == 0 {
            return bad("n_restarts must be >= 1");
        }
        if matches!(self.kind, AttackKind::ApgdT | AttackKind::FabT)
            && (self.n_target_classes == 0 || self.n_target_classes >= num_classes)
        {
            return bad("n_target_classes must lie in [1, classes - 1]");
        }
        if num_classes < 4 && self.kind == AttackKind::ApgdT {
            return bad("the DLR loss needs at least 4 classes");
        }
        if !(0.0..=1.0).contains(&self.apgd_alpha) || !(0.0..=1.0).contains(&self.apgd_rho) {
            return bad("apgd_alpha and apgd_rho must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fab_alpha_max) || !(0.0..=1.0).contains(&self.fab_beta) || !(self.fab_eta >= 1.0) {
            return bad("fab_alpha_max, fab_beta in [0, 1] and fab_eta >= 1 required");
        }
        if !(self.square_p_init > 0.0 && self.square_p_init <= 1.0) {
            return bad("square_p_init must lie in (0, 1]");
        }
        Ok(())
    }
}

/// What an attack needs from a classifier: logits, and optionally
/// vector-Jacobian products of the logits with respect to the input.
pub trait AttackModel {
    fn num_classes(&self) -> usize;
    /// `[channels, height, width]`
    fn image_dims(&self) -> [usize; 3];
    fn logits(&self, images: &Tensor) -> Result<Tensor, ModelError>;
    fn has_gradients(&self) -> bool;
    /// Returns the logits and `sum_i <seed_i, d logits_i / d x>`, where the
    /// seed rows are produced from the logits by `seed`.
    fn vjp(&self, images: &Tensor, seed: &mut dyn FnMut(&Tensor) -> Tensor) -> Result<(Tensor, Tensor), ModelError>;
}

impl AttackModel for Classifier {
    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn image_dims(&self) -> [usize; 3] {
        let s = self.spec();
        [s.channels, s.height, s.width]
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        Classifier::logits(self, images)
    }

    fn has_gradients(&self) -> bool {
        self.supports_gradients()
    }

    fn vjp(&self, images: &Tensor, seed: &mut dyn FnMut(&Tensor) -> Tensor) -> Result<(Tensor, Tensor), ModelError> {
        Classifier::vjp(self, images, |z| Ok(seed(z)))
    }
}

/// Whether an instrumented sequence must never go down or never go up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotone {
    NonDecreasing,
    NonIncreasing,
}

/// One instrumented objective sequence for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTrace {
    /// Position of the image inside its batch.
    pub image: usize,
    pub direction: Monotone,
    pub values: Vec<f32>,
}

impl ObjectiveTrace {
    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| match self.direction {
            Monotone::NonDecreasing => w[1] >= w[0],
            Monotone::NonIncreasing => w[1] <= w[0],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub kind: AttackKind,
    pub config: AttackConfig,
    /// Global index of the first image (drives per-image random streams).
    pub first_index: usize,
    /// `[N, C, H, W]` in `[0,1]`.
    pub originals: Tensor,
    pub adversarials: Tensor,
    pub labels: Vec<usize>,
    /// The attacked model misclassifies the adversarial image.
    pub success: Vec<bool>,
    /// Objective at the returned point: APGD loss, Square margin, FAB
    /// perturbation norm.
    pub final_loss: Vec<f32>,
    /// Model queries per image (Square only).
    pub queries: Option<Vec<u32>>,
    pub traces: Vec<ObjectiveTrace>,
    /// For FAB: per image, every successful iterate's l∞ norm.
    pub fab_norms: Vec<Vec<f32>>,
}

/// Violations found by [`AdversarialBatch::audit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Audit {
    pub images: usize,
    pub bound_violations: usize,
    pub range_violations: usize,
    pub trace_violations: usize,
    pub fab_norm_violations: usize,
}

impl Audit {
    pub fn is_clean(&self) -> bool {
        self.bound_violations + self.range_violations + self.trace_violations + self.fab_norm_violations == 0
    }

    pub fn merge(&mut self, other: &Audit) {
        self.images += other.images;
        self.bound_violations += other.bound_violations;
        self.range_violations += other.range_violations;
        self.trace_violations += other.trace_violations;
        self.fab_norm_violations += other.fab_norm_violations;
    }
}

/// Tolerance on the l∞ bound.
pub const BOUND_SLACK: f32 = 1e-6;

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-image l∞ distance between adversarial and original.
    pub fn linf_norms(&self) -> Vec<f32> {
        let d = self.originals.len() / self.len().max(1);
        self.originals
            .data()
            .chunks_exact(d.max(1))
            .zip(self.adversarials.data().chunks_exact(d.max(1)))
            .map(|(a, b)| linf(a, b))
            .collect()
    }

    /// Checks the hard invariants: ε-ball, `[0,1]` range, monotone traces and
    /// FAB's minimal-norm output.
    pub fn audit(&self) -> Audit {
        let mut audit = Audit {
            images: self.len(),
            ..Audit::default()
        };
        let norms = self.linf_norms();
        audit.bound_violations = norms.iter().filter(|&&n| !(n <= self.config.epsilon + BOUND_SLACK)).count();
        let d = self.originals.len() / self.len().max(1);
        audit.range_violations = self
            .adversarials
            .data()
            .chunks_exact(d.max(1))
            .filter(|img| img.iter().any(|v| !(0.0..=1.0).contains(v)))
            .count();
        audit.trace_violations = self.traces.iter().filter(|t| !t.is_monotone()).count();
        audit.fab_norm_violations = self
            .fab_norms
            .iter()
            .zip(&norms)
            .zip(&self.success)
            .filter(|((seen, &n), &ok)| ok && seen.iter().any(|&s| n > s))
            .count();
        audit
    }

    /// Concatenates chunks produced for consecutive image ranges.
    pub fn concat(parts: Vec<AdversarialBatch>) -> Result<AdversarialBatch, AttackError> {
        let mut iter = parts.into_iter();
        let Some(mut out) = iter.next() else {
            return Err(AttackError::InvalidConfig("nothing to concatenate".into()));
        };
        let mut orig = out.originals.data().to_vec();
        let mut adv = out.adversarials.data().to_vec();
        let mut dims = out.originals.shape().to_vec();
        for p in iter {
            if p.kind != out.kind || p.first_index != out.first_index + out.len() || p.originals.shape()[1..] != dims[1..] {
                return Err(AttackError::InvalidConfig("batches are not consecutive chunks of one attack".into()));
            }
            let offset = out.len();
            orig.extend_from_slice(p.originals.data());
            adv.extend_from_slice(p.adversarials.data());
            out.labels.extend(p.labels);
            out.success.extend(p.success);
            out.final_loss.extend(p.final_loss);
            out.fab_norms.extend(p.fab_norms);
            match (&mut out.queries, p.queries) {
                (Some(q), Some(r)) => q.extend(r),
                (None, None) => {}
                _ => return Err(AttackError::InvalidConfig("query counts present in only some chunks".into())),
            }
            out.traces.extend(p.traces.into_iter().map(|mut t| {
                t.image += offset;
                t
            }));
            dims[0] = out.labels.len();
        }
        out.originals = Tensor::new(dims.clone(), orig).map_err(ModelError::from)?;
        out.adversarials = Tensor::new(dims, adv).map_err(ModelError::from)?;
        Ok(out)
    }
}

pub(crate) fn linf(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

/// Clamp into the ε-ball around `x0` intersected with `[0,1]`.
#[inline]
pub(crate) fn project(x0: f32, eps: f32, v: f32) -> f32 {
    v.clamp((x0 - eps).max(0.0), (x0 + eps).min(1.0))
}

/// Stacks per-image flat buffers into an `[n, c, h, w]` tensor.
pub(crate) fn stack(dims: [usize; 3], images: &[&[f32]]) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * dims.iter().product::<usize>());
    for img in images {
        data.extend_from_slice(img);
    }
    Tensor::new(alloc::vec![images.len(), dims[0], dims[1], dims[2]], data).expect("consistent image sizes")
}

pub fn predictions(logits: &Tensor, classes: usize) -> Vec<usize> {
    logits.data().chunks_exact(classes).map(loss::argmax).collect()
}

/// Non-true classes ordered by decreasing clean logit.
pub(crate) fn target_ranking(z: &[f32], label: usize) -> Vec<usize> {
    loss::ranked(z).into_iter().filter(|&c| c != label).collect()
}

fn check_inputs<M: AttackModel + ?Sized>(model: &M, images: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<(), AttackError> {
    cfg.validate(model.num_classes())?;
    let [c, h, w] = model.image_dims();
    match images.shape() {
        &[n, cc, hh, ww] if cc == c && hh == h && ww == w && n == labels.len() => {}
        other => {
            return Err(ModelError::InputShape {
                expected: alloc::vec![labels.len(), c, h, w],
                got: other.to_vec(),
            }
            .into())
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(ModelError::LabelOutOfRange {
            label: l,
            classes: model.num_classes(),
        }
        .into());
    }
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(AttackError::InvalidConfig("attack inputs must lie in [0, 1]".into()));
    }
    if cfg.kind.needs_gradients() && !model.has_gradients() {
        return Err(AttackError::GradientUnavailable(cfg.kind));
    }
    Ok(())
}

/// Raw per-image result before final verification on the model.
pub(crate) struct Outcome {
    pub adversarials: Vec<f32>,
    pub final_loss: Vec<f32>,
    pub queries: Option<Vec<u32>>,
    pub traces: Vec<ObjectiveTrace>,
    pub fab_norms: Vec<Vec<f32>>,
}

/// Runs one attack on a chunk of images whose first global index is
/// `first_index`.
pub fn run_attack<M: AttackModel + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
    first_index: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch, AttackError> {
    check_inputs(model, images, labels, cfg)?;
    let outcome = if labels.is_empty() {
        Outcome {
            adversarials: Vec::new(),
            final_loss: Vec::new(),
            queries: (cfg.kind == AttackKind::Square).then(Vec::new),
            traces: Vec::new(),
            fab_norms: Vec::new(),
        }
    } else {
        match cfg.kind {
            AttackKind::ApgdCe | AttackKind::ApgdT => apgd::run(model, images, labels, first_index, cfg)?,
            AttackKind::FabT => fab::run(model, images, labels, cfg)?,
            AttackKind::Square => square::run(model, images, labels, first_index, cfg)?,
        }
    };
    let adversarials = Tensor::new(images.shape().to_vec(), outcome.adversarials).map_err(ModelError::from)?;
    let success = if labels.is_empty() {
        Vec::new()
    } else {
        let preds = predictions(&model.logits(&adversarials)?, model.num_classes());
        preds.iter().zip(labels).map(|(p, y)| p != y).collect()
    };
    Ok(AdversarialBatch {
        kind: cfg.kind,
        config: *cfg,
        first_index,
        originals: images.clone(),
        adversarials,
        labels: labels.to_vec(),
        success,
        final_loss: outcome.final_loss,
        queries: outcome.queries,
        traces: outcome.traces,
        fab_norms: outcome.fab_norms,
    })
}

/// Runs an attack over a whole image set in fixed-size chunks, sequentially.
/// Equal to running the chunks in any order and concatenating.
pub fn run_chunked<M: AttackModel + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<AdversarialBatch, AttackError> {
    let d = images.len() / labels.len().max(1);
    let mut parts = Vec::new();
    for (i, ls) in labels.chunks(chunk.max(1)).enumerate() {
        let start = i * chunk.max(1);
        let mut shape = images.shape().to_vec();
        shape[0] = ls.len();
        let data = images.data()[start * d..(start + ls.len()) * d].to_vec();
        let part = Tensor::new(shape, data).map_err(ModelError::from)?;
        parts.push(run_attack(model, &part, ls, start, cfg)?);
    }
    if parts.is_empty() {
        return run_attack(model, images, labels, 0, cfg);
    }
    AdversarialBatch::concat(parts)
}

/// Runs each configured attack against the same model and images. A failing
/// attack does not stop the others.
pub fn run_attack_suite<M: AttackModel + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
    configs: &[AttackConfig],
    chunk: usize,
) -> BTreeMap<AttackKind, Result<AdversarialBatch, AttackError>> {
    configs
        .iter()
        .map(|cfg| (cfg.kind, run_chunked(model, images, labels, cfg, chunk)))
        .collect()
}
