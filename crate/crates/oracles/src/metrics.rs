//! Metric recount by explicit set enumeration.

use std::collections::BTreeSet;

use aetransfer_core::metrics::EvalRecord;

/// `(correct, N)` for accuracy on adversarial examples.
pub fn accuracy_counts(records: &[EvalRecord]) -> (u64, u64) {
    let correct: BTreeSet<usize> = (0..records.len()).filter(|&k| records[k].target_adv == records[k].label).collect();
    (correct.len() as u64, records.len() as u64)
}

/// `(fooled, N_c)` for ASR, where `fooled` counts commonly-correct images
/// whose AE changes the target's decision away from the label.
pub fn asr_counts(records: &[EvalRecord], require_source: bool) -> (u64, u64) {
    let target_ok: BTreeSet<usize> = (0..records.len()).filter(|&k| records[k].target_clean == records[k].label).collect();
    let source_ok: BTreeSet<usize> = (0..records.len()).filter(|&k| records[k].source_clean == records[k].label).collect();
    let common: BTreeSet<usize> = target_ok.intersection(&source_ok).copied().collect();
    let target_fooled: BTreeSet<usize> = (0..records.len()).filter(|&k| records[k].target_adv != records[k].label).collect();
    let mut fooled: BTreeSet<usize> = common.intersection(&target_fooled).copied().collect();
    if require_source {
        let source_fooled: BTreeSet<usize> = (0..records.len())
            .filter(|&k| records[k].source_adv.is_some_and(|p| p != records[k].label))
            .collect();
        fooled = fooled.intersection(&source_fooled).copied().collect();
    }
    (fooled.len() as u64, common.len() as u64)
}

/// Percentage with two decimals, rounded half-up, from exact counts.
pub fn format_percent(num: u64, den: u64) -> String {
    // 100 * num / den in units of 0.01, computed with long division.
    let scaled = num as u128 * 10_000;
    let q = scaled / den as u128;
    let r = scaled % den as u128;
    let q = if 2 * r >= den as u128 { q + 1 } else { q };
    format!("{}.{:02}", q / 100, q % 100)
}
