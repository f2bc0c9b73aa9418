//! Accuracy and attack success rate over per-image evaluation records, and
//! source → target transfer grids.
//!
//! All values are kept as integer ratios; rounding happens only when a value
//! is formatted.

#[cfg(test)]
mod tests;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::attack::{predictions, AdversarialBatch, AttackKind, AttackModel};
use crate::crypto::Transform;
use crate::model::ModelError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("no evaluation records")]
    Empty,
    #[error("record {0} lacks the source prediction on its adversarial example")]
    MissingSourceAdversarial(usize),
}

/// Predictions for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EvalRecord {
    pub label: usize,
    pub source_clean: usize,
    pub target_clean: usize,
    pub target_adv: usize,
    /// Source prediction on the adversarial example; only needed by
    /// [`AsrMode::RequireSourceSuccess`].
    pub source_adv: Option<usize>,
}

impl EvalRecord {
    /// Both models classify the clean image correctly.
    pub fn commonly_correct(&self) -> bool {
        self.target_clean == self.label && self.source_clean == self.label
    }
}

/// An exact non-negative fraction `num / den` with `den > 0`, read as a
/// percentage `100 * num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Percent {
    pub num: u64,
    pub den: u64,
}

impl Percent {
    pub fn value(&self) -> f64 {
        100.0 * self.num as f64 / self.den as f64
    }

    /// Hundredths of a percent, rounded half-up.
    pub fn hundredths(&self) -> u64 {
        let (n, d) = (self.num as u128, self.den as u128);
        ((20_000 * n + d) / (2 * d)) as u64
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.hundredths();
        write!(f, "{}.{:02}", h / 100, h % 100)
    }
}

/// ASR is undefined when no image is classified correctly by both models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Asr {
    Defined(Percent),
    Undefined,
}

impl Asr {
    pub fn percent(&self) -> Option<Percent> {
        match self {
            Asr::Defined(p) => Some(*p),
            Asr::Undefined => None,
        }
    }
}

impl fmt::Display for Asr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Asr::Defined(p) => p.fmt(f),
            Asr::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AsrMode {
    /// Success means only that the AE fools the target.
    #[default]
    Formula,
    /// Non-default: the AE must also fool the source model.
    RequireSourceSuccess,
}

/// `100/N · |{k : C_t(x_k^adv) = y_k}|`
pub fn accuracy(records: &[EvalRecord]) -> Result<Percent, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = records.iter().filter(|r| r.target_adv == r.label).count();
    Ok(Percent {
        num: correct as u64,
        den: records.len() as u64,
    })
}

/// Number of commonly-correct images.
pub fn common_count(records: &[EvalRecord]) -> usize {
    records.iter().filter(|r| r.commonly_correct()).count()
}

/// Fraction of commonly-correct images whose adversarial example fools the
/// target.
pub fn asr(records: &[EvalRecord], mode: AsrMode) -> Result<Asr, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut common = 0u64;
    let mut fooled = 0u64;
    for (i, r) in records.iter().enumerate() {
        if !r.commonly_correct() {
            continue;
        }
        common += 1;
        let source_ok = match mode {
            AsrMode::Formula => true,
            AsrMode::RequireSourceSuccess => r.source_adv.ok_or(MetricError::MissingSourceAdversarial(i))? != r.label,
        };
        if r.target_adv != r.label && source_ok {
            fooled += 1;
        }
    }
    Ok(if common == 0 {
        Asr::Undefined
    } else {
        Asr::Defined(Percent { num: fooled, den: common })
    })
}

/// Identifies a model in a transfer grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelTag {
    pub name: String,
    pub transform: Option<Transform>,
    pub block_size: Option<usize>,
}

impl ModelTag {
    pub fn plain(name: impl Into<String>) -> Self {
        ModelTag {
            name: name.into(),
            transform: None,
            block_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMetrics {
    pub n: usize,
    pub n_c: usize,
    pub acc: Percent,
    pub asr: Asr,
    pub records: Vec<EvalRecord>,
}

impl CellMetrics {
    pub fn from_records(records: Vec<EvalRecord>, mode: AsrMode) -> Result<Self, MetricError> {
        Ok(CellMetrics {
            n: records.len(),
            n_c: common_count(&records),
            acc: accuracy(&records)?,
            asr: asr(&records, mode)?,
            records,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub source: ModelTag,
    pub target: ModelTag,
    pub attack: AttackKind,
    /// `None` when the adversarial batch was missing.
    pub metrics: Option<CellMetrics>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TransferReport {
    pub cells: Vec<Cell>,
}

impl TransferReport {
    pub fn get(&self, source: &str, target: &str, attack: AttackKind) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.source.name == source && c.target.name == target && c.attack == attack)
    }
}

/// A named model taking part in a grid.
pub struct GridModel<'a, M: ?Sized> {
    pub tag: ModelTag,
    pub model: &'a M,
}

/// Predicted labels in batches of `batch` images.
pub fn predict_labels<M: AttackModel + ?Sized>(model: &M, images: &Tensor, batch: usize) -> Result<Vec<usize>, ModelError> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = images.len() / n;
    let mut out = Vec::with_capacity(n);
    for chunk in images.data().chunks(d * batch.max(1)) {
        let mut shape = images.shape().to_vec();
        shape[0] = chunk.len() / d;
        let t = Tensor::new(shape, chunk.to_vec())?;
        out.extend(predictions(&model.logits(&t)?, model.num_classes()));
    }
    Ok(out)
}

/// Records for one (source batch, target) pair. `source_clean` and
/// `source_adv` are the source model's predictions on the batch's originals
/// and adversarials.
pub fn eval_records<M: AttackModel + ?Sized>(
    batch: &AdversarialBatch,
    source_clean: &[usize],
    source_adv: Option<&[usize]>,
    target: &M,
    predict_batch: usize,
) -> Result<Vec<EvalRecord>, ModelError> {
    let target_clean = predict_labels(target, &batch.originals, predict_batch)?;
    let target_adv = predict_labels(target, &batch.adversarials, predict_batch)?;
    Ok((0..batch.len())
        .map(|i| EvalRecord {
            label: batch.labels[i],
            source_clean: source_clean[i],
            target_clean: target_clean[i],
            target_adv: target_adv[i],
            source_adv: source_adv.map(|s| s[i]),
        })
        .collect())
}

/// Fills the grid sources × targets × attacks. A missing batch yields an
/// absent cell; the remaining cells are still computed.
pub fn transfer_matrix<M: AttackModel + ?Sized>(
    sources: &[GridModel<'_, M>],
    targets: &[GridModel<'_, M>],
    attacks: &[AttackKind],
    batches: &BTreeMap<(String, AttackKind), AdversarialBatch>,
    mode: AsrMode,
) -> Result<TransferReport, ModelError> {
    const PREDICT_BATCH: usize = 128;
    let mut cells = Vec::new();
    for s in sources {
        for &attack in attacks {
            let batch = batches.get(&(s.tag.name.clone(), attack));
            let source_preds = match batch {
                Some(b) => Some((
                    predict_labels(s.model, &b.originals, PREDICT_BATCH)?,
                    predict_labels(s.model, &b.adversarials, PREDICT_BATCH)?,
                )),
                None => None,
            };
            for t in targets {
                let metrics = match (batch, &source_preds) {
                    (Some(b), Some((clean, adv))) if !b.is_empty() => {
                        let records = eval_records(b, clean, Some(adv), t.model, PREDICT_BATCH)?;
                        Some(CellMetrics::from_records(records, mode).expect("non-empty records"))
                    }
                    _ => None,
                };
                cells.push(Cell {
                    source: s.tag.clone(),
                    target: t.tag.clone(),
                    attack,
                    metrics,
                });
            }
        }
    }
    Ok(TransferReport { cells })
}
