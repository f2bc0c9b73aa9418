//! Per-image attack and training objectives on a logit row, with their
//! gradients with respect to the logits.

use alloc::vec;
use alloc::vec::Vec;

/// Guard added to the DLR denominator.
pub const DLR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// `logsumexp(z) - z_y`.
    CrossEntropy,
    /// Targeted DLR: `-(z_y - z_t) / (z_pi1 - (z_pi3 + z_pi4) / 2)` over the
    /// logits sorted in decreasing order.
    DlrTargeted,
    /// `z_y - max_{i != y} z_i` (negative means misclassified).
    Margin,
    /// `z_y - z_t`.
    LogitDifference,
}

/// Indices sorted by decreasing logit, ties broken by index.
pub fn ranked(z: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx
}

pub fn argmax(z: &[f32]) -> usize {
    ranked(z)[0]
}

/// Largest logit other than `label`.
fn runner_up(z: &[f32], label: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in z.iter().enumerate() {
        if i != label && (best == usize::MAX || v > z[best]) {
            best = i;
        }
    }
    best
}

/// Loss value and its gradient with respect to `z`. `target` is only read by
/// the targeted losses.
pub fn loss_and_grad(kind: LossKind, z: &[f32], label: usize, target: usize) -> (f32, Vec<f32>) {
    let k = z.len();
    let mut grad = vec![0.0f32; k];
    let value = match kind {
        LossKind::CrossEntropy => {
            let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = z.iter().map(|&v| libm::exp(v as f64 - max)).collect();
            let total: f64 = exps.iter().sum();
            for (g, e) in grad.iter_mut().zip(&exps) {
                *g = (e / total) as f32;
            }
            // p_y - 1 = -(mass off the label), kept exact when p_y rounds to 1.
            let off: f64 = exps.iter().enumerate().filter(|&(j, _)| j != label).map(|(_, e)| e).sum();
            grad[label] = (-off / total) as f32;
            max + libm::log(total) - z[label] as f64
        }
        LossKind::DlrTargeted => {
            let r = ranked(z);
            let zf = |i: usize| z[i] as f64;
            let num = zf(label) - zf(target);
            let den = zf(r[0]) - 0.5 * (zf(r[2]) + zf(r[3])) + DLR_EPS;
            grad[label] -= (1.0 / den) as f32;
            grad[target] += (1.0 / den) as f32;
            let s = num / (den * den);
            grad[r[0]] += s as f32;
            grad[r[2]] -= (0.5 * s) as f32;
            grad[r[3]] -= (0.5 * s) as f32;
            -num / den
        }
        LossKind::Margin => {
            let other = runner_up(z, label);
            grad[label] = 1.0;
            grad[other] = -1.0;
            z[label] as f64 - z[other] as f64
        }
        LossKind::LogitDifference => {
            grad[label] = 1.0;
            grad[target] -= 1.0;
            z[label] as f64 - z[target] as f64
        }
    };
    (value as f32, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(kind: LossKind, z: &[f32], y: usize, t: usize) -> Vec<f64> {
        let h = 1e-3f64;
        (0..z.len())
            .map(|i| {
                let eval = |d: f64| {
                    let zz: Vec<f32> = z.iter().enumerate().map(|(j, &v)| if j == i { (v as f64 + d) as f32 } else { v }).collect();
                    loss_and_grad(kind, &zz, y, t).0 as f64
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let z = [1.3f32, -0.2, 2.9, 0.4, 0.05, -1.7, 0.9, 2.2, -0.6, 1.1];
        for kind in [LossKind::CrossEntropy, LossKind::DlrTargeted, LossKind::Margin, LossKind::LogitDifference] {
            let (_, g) = loss_and_grad(kind, &z, 3, 7);
            for (a, b) in g.iter().zip(fd(kind, &z, 3, 7)) {
                assert!((*a as f64 - b).abs() < 2e-2, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn margin_sign_tracks_correctness() {
        assert!(loss_and_grad(LossKind::Margin, &[2.0, 1.0, 0.0], 0, 0).0 > 0.0);
        assert!(loss_and_grad(LossKind::Margin, &[2.0, 1.0, 0.0], 1, 0).0 < 0.0);
    }

    #[test]
    fn dlr_is_finite_on_degenerate_logits() {
        let (v, g) = loss_and_grad(LossKind::DlrTargeted, &[0.0; 10], 0, 1);
        assert!(v.is_finite() && g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_when_saturated() {
        let (_, g) = loss_and_grad(LossKind::CrossEntropy, &[30.0, 0.0, -2.0], 0, 0);
        let off = g[1] as f64 + g[2] as f64;
        assert!(g[0] < 0.0);
        assert!(((g[0] as f64 + off) / off).abs() < 1e-6, "{g:?}");
    }

    #[test]
    fn cross_entropy_is_non_negative() {
        let (v, _) = loss_and_grad(LossKind::CrossEntropy, &[5.0, -3.0, 0.5], 0, 0);
        assert!(v >= 0.0);
    }
}
