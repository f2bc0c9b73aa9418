//! Auto-PGD: sign-gradient ascent with momentum and a step size that is halved
//! at checkpoints where progress stalls.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{predictions, project, stack, target_ranking, AttackConfig, AttackError, AttackKind, AttackModel, Monotone, ObjectiveTrace, Outcome};
use crate::model::loss::{loss_and_grad, LossKind};
use crate::model::ModelError;
use crate::rng;
use crate::tensor::Tensor;

struct Eval {
    losses: Vec<f32>,
    preds: Vec<usize>,
    grads: Vec<f32>,
}

fn evaluate<M: AttackModel + ?Sized>(
    model: &M,
    dims: [usize; 3],
    points: &[&[f32]],
    labels: &[usize],
    targets: Option<&[usize]>,
    loss: LossKind,
) -> Result<Eval, ModelError> {
    let k = model.num_classes();
    let x = stack(dims, points);
    let mut losses = Vec::with_capacity(points.len());
    let (logits, grad) = model.vjp(&x, &mut |z: &Tensor| {
        let mut seed = Vec::with_capacity(z.len());
        for (i, row) in z.data().chunks_exact(k).enumerate() {
            let (v, g) = loss_and_grad(loss, row, labels[i], targets.map_or(0, |t| t[i]));
            losses.push(v);
            seed.extend(g);
        }
        Tensor::new(z.shape().to_vec(), seed).expect("logit-shaped seed")
    })?;
    Ok(Eval {
        losses,
        preds: predictions(&logits, k),
        grads: grad.into_data(),
    })
}

/// Best points of one APGD run for a set of images.
struct RunResult {
    /// Highest-loss misclassified point, if any was visited.
    best_adv: Vec<Option<(Vec<f32>, f32)>>,
    /// Highest-loss point overall.
    best: Vec<(Vec<f32>, f32)>,
    traces: Vec<Vec<f32>>,
}

/// Iteration counts between checkpoints shrink from 22% of the budget by 3%
/// each time down to 6%.
fn checkpoint_lengths(n_iter: usize) -> (usize, usize, usize) {
    let frac = |f: f64| ((f * n_iter as f64) as usize).max(1);
    (frac(0.22), frac(0.06), frac(0.03))
}

#[allow(clippy::too_many_arguments)]
fn single_run<M: AttackModel + ?Sized>(
    model: &M,
    cfg: &AttackConfig,
    dims: [usize; 3],
    originals: &[&[f32]],
    labels: &[usize],
    targets: Option<&[usize]>,
    loss: LossKind,
    starts: Vec<Vec<f32>>,
) -> Result<RunResult, ModelError> {
    let n = originals.len();
    let eps = cfg.epsilon;
    let mut x_adv = starts;
    let first = evaluate(model, dims, &refs(&x_adv), labels, targets, loss)?;
    let mut grad: Vec<Vec<f32>> = first.grads.chunks_exact(x_adv[0].len()).map(<[f32]>::to_vec).collect();
    let mut loss_best = first.losses.clone();
    let mut best: Vec<Vec<f32>> = x_adv.clone();
    let mut grad_best = grad.clone();
    let mut best_adv: Vec<Option<(Vec<f32>, f32)>> = (0..n)
        .map(|i| (first.preds[i] != labels[i]).then(|| (x_adv[i].clone(), first.losses[i])))
        .collect();
    let mut traces: Vec<Vec<f32>> = loss_best.iter().map(|&l| vec![l]).collect();
    let mut history: Vec<Vec<f32>> = first.losses.iter().map(|&l| vec![l]).collect();
    let mut step = vec![2.0 * eps; n];
    let mut x_old = x_adv.clone();
    let (mut k, k_min, k_decr) = checkpoint_lengths(cfg.n_iter);
    let mut since_check = 0;
    let mut reduced_last = vec![true; n];
    let mut best_at_last = loss_best.clone();

    for it in 0..cfg.n_iter {
        let a = if it == 0 { 1.0 } else { cfg.apgd_alpha };
        for i in 0..n {
            let x0 = originals[i];
            let (cur, old, g) = (&mut x_adv[i], &mut x_old[i], &grad[i]);
            for j in 0..cur.len() {
                let momentum = cur[j] - old[j];
                let z = project(x0[j], eps, cur[j] + step[i] * sign(g[j]));
                let next = project(x0[j], eps, cur[j] + (z - cur[j]) * a + momentum * (1.0 - a));
                old[j] = cur[j];
                cur[j] = next;
            }
        }
        let e = evaluate(model, dims, &refs(&x_adv), labels, targets, loss)?;
        let d = x_adv[0].len();
        for i in 0..n {
            let l = e.losses[i];
            grad[i].copy_from_slice(&e.grads[i * d..(i + 1) * d]);
            if e.preds[i] != labels[i] && best_adv[i].as_ref().is_none_or(|(_, b)| l > *b) {
                best_adv[i] = Some((x_adv[i].clone(), l));
            }
            if l > loss_best[i] {
                loss_best[i] = l;
                best[i].copy_from_slice(&x_adv[i]);
                grad_best[i].copy_from_slice(&grad[i]);
            }
            history[i].push(l);
            traces[i].push(loss_best[i]);
        }
        since_check += 1;
        if since_check == k {
            for i in 0..n {
                let h = &history[i];
                let increases = h.windows(2).rev().take(k).filter(|w| w[1] > w[0]).count();
                let oscillating = (increases as f32) <= k as f32 * cfg.apgd_rho;
                let no_improvement = !reduced_last[i] && best_at_last[i] >= loss_best[i];
                let reduce = oscillating || no_improvement;
                reduced_last[i] = reduce;
                best_at_last[i] = loss_best[i];
                if reduce {
                    step[i] /= 2.0;
                    x_adv[i].copy_from_slice(&best[i]);
                    grad[i].copy_from_slice(&grad_best[i]);
                }
            }
            since_check = 0;
            k = k.saturating_sub(k_decr).max(k_min);
        }
    }
    Ok(RunResult {
        best_adv,
        best: best.into_iter().zip(loss_best).collect(),
        traces,
    })
}

fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
    v.iter().map(Vec::as_slice).collect()
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform start in the ε-ball, scaled so its largest coordinate sits on the
/// boundary, then clipped to `[0,1]`.
fn random_start(x0: &[f32], eps: f32, seed: u64, kind: AttackKind, index: usize, restart: usize, target: usize) -> Vec<f32> {
    let mut r = rng::stream(
        seed,
        &[rng::label(kind.as_str()), rng::label("start"), index as u64, restart as u64, target as u64],
    );
    let t: Vec<f32> = (0..x0.len()).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let m = t.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    x0.iter().zip(&t).map(|(&x, &v)| (x + eps * v / m).clamp(0.0, 1.0)).collect()
}

pub(super) fn run<M: AttackModel + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
    first_index: usize,
    cfg: &AttackConfig,
) -> Result<Outcome, AttackError> {
    let dims = model.image_dims();
    let d: usize = dims.iter().product();
    let n = labels.len();
    let originals: Vec<&[f32]> = images.data().chunks_exact(d).collect();
    let (loss, targets_per_image) = match cfg.kind {
        AttackKind::ApgdCe => (LossKind::CrossEntropy, None),
        _ => {
            let logits = model.logits(images)?;
            let k = model.num_classes();
            let ranks: Vec<Vec<usize>> = logits
                .data()
                .chunks_exact(k)
                .zip(labels)
                .map(|(z, &y)| target_ranking(z, y).into_iter().take(cfg.n_target_classes).collect())
                .collect();
            (LossKind::DlrTargeted, Some(ranks))
        }
    };
    let rounds = targets_per_image.as_ref().map_or(1, |_| cfg.n_target_classes);

    let mut done = vec![false; n];
    let mut output: Vec<Option<(Vec<f32>, f32)>> = vec![None; n];
    let mut traces = Vec::new();
    for target_round in 0..rounds {
        for restart in 0..cfg.n_restarts {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let starts = active
                .iter()
                .map(|&i| random_start(originals[i], cfg.epsilon, cfg.seed, cfg.kind, first_index + i, restart, target_round))
                .collect();
            let sub_orig: Vec<&[f32]> = active.iter().map(|&i| originals[i]).collect();
            let sub_labels: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
            let sub_targets: Option<Vec<usize>> = targets_per_image
                .as_ref()
                .map(|t| active.iter().map(|&i| t[i][target_round]).collect());
            let res = single_run(model, cfg, dims, &sub_orig, &sub_labels, sub_targets.as_deref(), loss, starts)?;
            for (pos, &i) in active.iter().enumerate() {
                traces.push(ObjectiveTrace {
                    image: i,
                    direction: Monotone::NonDecreasing,
                    values: res.traces[pos].clone(),
                });
                if let Some(found) = &res.best_adv[pos] {
                    output[i] = Some(found.clone());
                    done[i] = true;
                } else if output[i].as_ref().is_none_or(|(_, l)| target_round == 0 && res.best[pos].1 > *l) {
                    output[i] = Some(res.best[pos].clone());
                }
            }
        }
    }
    let mut adversarials = Vec::with_capacity(n * d);
    let mut final_loss = Vec::with_capacity(n);
    for (i, o) in output.into_iter().enumerate() {
        let (x, l) = o.unwrap_or_else(|| (originals[i].to_vec(), f32::NAN));
        adversarials.extend(x);
        final_loss.push(l);
    }
    Ok(Outcome {
        adversarials,
        final_loss,
        queries: None,
        traces,
        fab_norms: Vec::new(),
    })
}
