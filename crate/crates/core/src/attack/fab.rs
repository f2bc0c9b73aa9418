//! Targeted FAB: repeatedly linearize the difference between the target and
//! the true logit, project onto the linearized boundary from both the current
//! iterate and the original image, and mix the two with a bias toward the
//! original. The smallest successful perturbation is kept.

use alloc::vec;
use alloc::vec::Vec;

use super::{linf, predictions, stack, target_ranking, AttackConfig, AttackError, AttackModel, Outcome};
use crate::model::ModelError;
use crate::tensor::Tensor;

/// Bisection steps used to pull a successful point back toward the original.
const REFINE_STEPS: usize = 24;

/// Smallest-l∞ step `d` with `w·(p + d) >= b` and `p + d` inside `[0,1]`.
///
/// For a radius `t` the largest reachable value of `w·d` is
/// `sum_i |w_i| min(t, room_i)`, where `room_i` is the distance to the box
/// wall in the direction of `sign(w_i)`; the answer is the smallest `t` that
/// reaches `b - w·p`. If no radius does, every coordinate moves to its wall.
pub fn project_linf_halfspace(p: &[f32], w: &[f32], b: f64) -> Vec<f32> {
    let need = b - p.iter().zip(w).map(|(&x, &v)| x as f64 * v as f64).sum::<f64>();
    if !(need > 0.0) {
        return vec![0.0; p.len()];
    }
    let room = |i: usize| -> f64 {
        if w[i] > 0.0 {
            1.0 - p[i] as f64
        } else {
            p[i] as f64
        }
    };
    let mut order: Vec<usize> = (0..p.len()).filter(|&i| w[i] != 0.0).collect();
    order.sort_by(|&a, &b| room(a).total_cmp(&room(b)));
    let mut slope: f64 = order.iter().map(|&i| (w[i] as f64).abs()).sum();
    let mut fixed = 0.0f64;
    let mut t = order.last().map_or(0.0, |&i| room(i));
    for &i in &order {
        let candidate = (need - fixed) / slope;
        if candidate <= room(i) {
            t = candidate;
            break;
        }
        fixed += (w[i] as f64).abs() * room(i);
        slope -= (w[i] as f64).abs();
    }
    (0..p.len())
        .map(|i| {
            if w[i] == 0.0 {
                0.0
            } else {
                (t.min(room(i)) * (w[i] as f64).signum()) as f32
            }
        })
        .collect()
}

/// Difference `z_t - z_y` and its input gradient for every image.
fn linearize<M: AttackModel + ?Sized>(
    model: &M,
    dims: [usize; 3],
    points: &[&[f32]],
    labels: &[usize],
    targets: &[usize],
) -> Result<(Vec<f32>, Vec<usize>, Vec<f32>), ModelError> {
    let k = model.num_classes();
    let x = stack(dims, points);
    let (logits, grad) = model.vjp(&x, &mut |z: &Tensor| {
        let mut seed = vec![0.0f32; z.len()];
        for i in 0..labels.len() {
            seed[i * k + targets[i]] += 1.0;
            seed[i * k + labels[i]] -= 1.0;
        }
        Tensor::new(z.shape().to_vec(), seed).expect("logit-shaped seed")
    })?;
    let z = logits.data();
    let diffs = (0..labels.len()).map(|i| z[i * k + targets[i]] - z[i * k + labels[i]]).collect();
    Ok((diffs, predictions(&logits, k), grad.into_data()))
}

fn misclassified<M: AttackModel + ?Sized>(model: &M, dims: [usize; 3], points: &[&[f32]], labels: &[usize]) -> Result<Vec<bool>, ModelError> {
    let preds = predictions(&model.logits(&stack(dims, points))?, model.num_classes());
    Ok(preds.iter().zip(labels).map(|(p, y)| p != y).collect())
}

/// Shrinks each successful point along the segment toward its original while
/// it stays misclassified.
fn refine<M: AttackModel + ?Sized>(
    model: &M,
    dims: [usize; 3],
    originals: &[&[f32]],
    advs: &mut [Vec<f32>],
    labels: &[usize],
) -> Result<(), ModelError> {
    let n = advs.len();
    let mut lo = vec![0.0f32; n];
    let mut hi = vec![1.0f32; n];
    let at = |i: usize, s: f32, adv: &[f32]| -> Vec<f32> { originals[i].iter().zip(adv).map(|(&x, &a)| x + s * (a - x)).collect() };
    for _ in 0..REFINE_STEPS {
        let mids: Vec<f32> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let points: Vec<Vec<f32>> = (0..n).map(|i| at(i, mids[i], &advs[i])).collect();
        let refs: Vec<&[f32]> = points.iter().map(Vec::as_slice).collect();
        let fooled = misclassified(model, dims, &refs, labels)?;
        for i in 0..n {
            if fooled[i] {
                hi[i] = mids[i];
            } else {
                lo[i] = mids[i];
            }
        }
    }
    for i in 0..n {
        if hi[i] < 1.0 {
            advs[i] = at(i, hi[i], &advs[i]);
        }
    }
    Ok(())
}

pub(super) fn run<M: AttackModel + ?Sized>(model: &M, images: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Outcome, AttackError> {
    let dims = model.image_dims();
    let d: usize = dims.iter().product();
    let k = model.num_classes();
    let n = labels.len();
    let originals: Vec<&[f32]> = images.data().chunks_exact(d).collect();
    let clean = model.logits(images)?;
    let clean_preds = predictions(&clean, k);
    let ranks: Vec<Vec<usize>> = clean.data().chunks_exact(k).zip(labels).map(|(z, &y)| target_ranking(z, y)).collect();

    // Misclassified inputs are their own minimal-norm solution.
    let mut best: Vec<Option<(Vec<f32>, f32)>> =
        (0..n).map(|i| (clean_preds[i] != labels[i]).then(|| (originals[i].to_vec(), 0.0))).collect();
    let mut seen_norms: Vec<Vec<f32>> = vec![Vec::new(); n];
    let within = |b: &Option<(Vec<f32>, f32)>| b.as_ref().is_some_and(|(_, r)| *r <= cfg.epsilon);

    for round in 0..cfg.n_target_classes {
        let active: Vec<usize> = (0..n).filter(|&i| !within(&best[i])).collect();
        if active.is_empty() {
            break;
        }
        let x0: Vec<&[f32]> = active.iter().map(|&i| originals[i]).collect();
        let ys: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let ts: Vec<usize> = active.iter().map(|&i| ranks[i][round]).collect();
        let m = active.len();
        let mut x1: Vec<Vec<f32>> = x0.iter().map(|x| x.to_vec()).collect();
        let mut found: Vec<Option<(Vec<f32>, f32)>> = vec![None; m];
        for _ in 0..cfg.n_iter {
            let refs: Vec<&[f32]> = x1.iter().map(Vec::as_slice).collect();
            let (df, _, dg) = linearize(model, dims, &refs, &ys, &ts)?;
            for j in 0..m {
                let w = &dg[j * d..(j + 1) * d];
                let b = -(df[j] as f64) + w.iter().zip(&x1[j]).map(|(&a, &x)| a as f64 * x as f64).sum::<f64>();
                let d1 = project_linf_halfspace(&x1[j], w, b);
                let d2 = project_linf_halfspace(x0[j], w, b);
                let a1 = d1.iter().fold(0.0f32, |s, v| s.max(v.abs())).max(1e-8);
                let a2 = d2.iter().fold(0.0f32, |s, v| s.max(v.abs())).max(1e-8);
                let alpha = (a1 / (a1 + a2)).clamp(0.0, cfg.fab_alpha_max);
                for q in 0..d {
                    let from_cur = x1[j][q] + cfg.fab_eta * d1[q];
                    let from_orig = x0[j][q] + cfg.fab_eta * d2[q];
                    x1[j][q] = (from_cur * (1.0 - alpha) + from_orig * alpha).clamp(0.0, 1.0);
                }
            }
            let refs: Vec<&[f32]> = x1.iter().map(Vec::as_slice).collect();
            let fooled = misclassified(model, dims, &refs, &ys)?;
            for j in 0..m {
                if !fooled[j] {
                    continue;
                }
                let t = linf(&x1[j], x0[j]);
                seen_norms[active[j]].push(t);
                if found[j].as_ref().is_none_or(|(_, r)| t < *r) {
                    found[j] = Some((x1[j].clone(), t));
                }
                for q in 0..d {
                    x1[j][q] = x0[j][q] + (x1[j][q] - x0[j][q]) * cfg.fab_beta;
                }
            }
        }
        let hits: Vec<usize> = (0..m).filter(|&j| found[j].is_some()).collect();
        let mut advs: Vec<Vec<f32>> = hits.iter().map(|&j| found[j].take().expect("hit").0).collect();
        let hit_orig: Vec<&[f32]> = hits.iter().map(|&j| x0[j]).collect();
        let hit_labels: Vec<usize> = hits.iter().map(|&j| ys[j]).collect();
        refine(model, dims, &hit_orig, &mut advs, &hit_labels)?;
        for (adv, &j) in advs.into_iter().zip(&hits) {
            let i = active[j];
            let t = linf(&adv, x0[j]);
            seen_norms[i].push(t);
            if best[i].as_ref().is_none_or(|(_, r)| t < *r) {
                best[i] = Some((adv, t));
            }
        }
    }

    let mut adversarials = Vec::with_capacity(n * d);
    let mut final_loss = Vec::with_capacity(n);
    for (i, b) in best.into_iter().enumerate() {
        match b {
            Some((x, t)) if t <= cfg.epsilon => {
                adversarials.extend(x);
                final_loss.push(t);
            }
            other => {
                adversarials.extend_from_slice(originals[i]);
                final_loss.push(other.map_or(f32::INFINITY, |(_, t)| t));
            }
        }
    }
    Ok(Outcome {
        adversarials,
        final_loss,
        queries: None,
        traces: Vec::new(),
        fab_norms: seen_norms,
    })
}
