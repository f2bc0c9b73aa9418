//! Square attack: random search over square patches set to ±ε per channel,
//! keeping a proposal only when it lowers the margin.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{project, stack, AttackConfig, AttackError, AttackKind, AttackModel, Monotone, ObjectiveTrace, Outcome};
use crate::model::loss::{loss_and_grad, LossKind};
use crate::model::ModelError;
use crate::rng;
use crate::tensor::Tensor;

/// Sign resamples allowed when a proposal would not change the image.
const MAX_RESAMPLES: usize = 64;

/// Patch area fraction at iteration `it`: the initial fraction halves at fixed
/// fractions of the budget (breakpoints given for a 10,000-query budget).
pub(crate) fn p_selection(p_init: f32, it: usize, n_iter: usize) -> f32 {
    let it = (it as f64 / n_iter.max(1) as f64 * 10_000.0) as usize;
    const BREAKS: [usize; 9] = [10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000];
    let halvings = BREAKS.iter().filter(|&&b| it > b).count();
    p_init / (1u32 << halvings) as f32
}

fn margins<M: AttackModel + ?Sized>(model: &M, dims: [usize; 3], points: &[&[f32]], labels: &[usize]) -> Result<Vec<f32>, ModelError> {
    let k = model.num_classes();
    let logits = model.logits(&stack(dims, points))?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(z, &y)| loss_and_grad(LossKind::Margin, z, y, 0).0)
        .collect())
}

fn sign(r: &mut ChaCha8Rng) -> f32 {
    if r.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

pub(super) fn run<M: AttackModel + ?Sized>(
    model: &M,
    images: &Tensor,
    labels: &[usize],
    first_index: usize,
    cfg: &AttackConfig,
) -> Result<Outcome, AttackError> {
    let [c, h, w] = model.image_dims();
    let dims = [c, h, w];
    let d = c * h * w;
    let n = labels.len();
    let eps = cfg.epsilon;
    let originals: Vec<&[f32]> = images.data().chunks_exact(d).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| rng::stream(cfg.seed, &[rng::label(AttackKind::Square.as_str()), (first_index + i) as u64]))
        .collect();

    // Vertical stripes: one sign per (channel, column).
    let stripes: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let signs: Vec<f32> = (0..c * w).map(|_| sign(&mut rngs[i])).collect();
            let mut x = originals[i].to_vec();
            for ch in 0..c {
                for y in 0..h {
                    for col in 0..w {
                        let q = (ch * h + y) * w + col;
                        x[q] = project(originals[i][q], eps, originals[i][q] + eps * signs[ch * w + col]);
                    }
                }
            }
            x
        })
        .collect();
    let clean_margin = margins(model, dims, &originals, labels)?;
    let stripe_refs: Vec<&[f32]> = stripes.iter().map(Vec::as_slice).collect();
    let stripe_margin = margins(model, dims, &stripe_refs, labels)?;
    let mut best: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut margin = Vec::with_capacity(n);
    for (i, s) in stripes.into_iter().enumerate() {
        if stripe_margin[i] < clean_margin[i] {
            best.push(s);
            margin.push(stripe_margin[i]);
        } else {
            best.push(originals[i].to_vec());
            margin.push(clean_margin[i]);
        }
    }
    let mut queries = vec![2u32; n];
    let mut traces: Vec<Vec<f32>> = margin.iter().map(|&m| vec![m]).collect();

    for it in 0..cfg.n_iter {
        let active: Vec<usize> = (0..n).filter(|&i| margin[i] > 0.0).collect();
        if active.is_empty() {
            break;
        }
        let p = p_selection(cfg.square_p_init, it, cfg.n_iter);
        let s = (libm::roundf(libm::sqrtf(p * (h * w) as f32)) as usize).clamp(1, h.min(w));
        let mut proposals = Vec::with_capacity(active.len());
        for &i in &active {
            let r = &mut rngs[i];
            let vh = if h > s { r.random_range(0..h - s) } else { 0 };
            let vw = if w > s { r.random_range(0..w - s) } else { 0 };
            let x0 = originals[i];
            let cur = &best[i];
            let window = |ch: usize| (vh..vh + s).flat_map(move |y| (vw..vw + s).map(move |x| (ch * h + y) * w + x));
            let mut signs: Vec<f32> = (0..c).map(|_| sign(r)).collect();
            for _ in 0..MAX_RESAMPLES {
                let unchanged = (0..c).all(|ch| window(ch).all(|q| (project(x0[q], eps, x0[q] + eps * signs[ch]) - cur[q]).abs() < 1e-7));
                if !unchanged || eps == 0.0 {
                    break;
                }
                signs = (0..c).map(|_| sign(r)).collect();
            }
            let mut x = cur.clone();
            for (ch, &sg) in signs.iter().enumerate() {
                for q in window(ch) {
                    x[q] = project(x0[q], eps, cur[q] + 2.0 * eps * sg);
                }
            }
            proposals.push(x);
        }
        let refs: Vec<&[f32]> = proposals.iter().map(Vec::as_slice).collect();
        let sub_labels: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let m_new = margins(model, dims, &refs, &sub_labels)?;
        for ((&i, x), mn) in active.iter().zip(proposals).zip(m_new) {
            queries[i] += 1;
            if mn < margin[i] {
                margin[i] = mn;
                best[i] = x;
                traces[i].push(mn);
            }
        }
    }

    Ok(Outcome {
        adversarials: best.concat(),
        final_loss: margin,
        queries: Some(queries),
        traces: traces
            .into_iter()
            .enumerate()
            .map(|(image, values)| ObjectiveTrace {
                image,
                direction: Monotone::NonIncreasing,
                values,
            })
            .collect(),
        fab_norms: Vec::new(),
    })
}
