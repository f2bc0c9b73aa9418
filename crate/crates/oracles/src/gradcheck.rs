//! Central finite differences on the f64 interpreter, compared against the
//! analytic gradients of the real autodiff engine.

use std::collections::BTreeMap;

use aetransfer_core::autodiff::{Bindings, Graph, Session};
use aetransfer_core::Tensor;

use crate::interp::{evaluate, Value};

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    /// `||analytic - numeric||_2 / max(||numeric||_2, ||analytic||_2)`, or 0
    /// when both norms are below [`VANISHING`].
    pub rel_error: f64,
    pub abs_error: f64,
    pub checked: usize,
    /// Coordinates where a probe crossed a ReLU or max-pool decision.
    pub skipped: usize,
    pub numeric_norm: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub leaves: Vec<LeafReport>,
}

/// Gradients whose norms both fall below this are treated as identically
/// zero (e.g. a bias that every softmax row ignores), where only absolute
/// error is meaningful.
pub const VANISHING: f64 = 1e-7;

impl Report {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.rel_error).fold(0.0, f64::max)
    }
}

/// Checks `d(sum_i c_i out_i)/d leaf` for each leaf in `wrt`, where `out` is
/// the named graph output and `c` is a fixed pseudo-random weighting (all
/// ones for a scalar output).
pub fn check(graph: &Graph, bindings: &BTreeMap<String, Tensor>, wrt: &[&str], output: &str, h: f64) -> Report {
    let out_id = graph.output_id(output).expect("output exists");

    // Analytic side: the engine under test.
    let mut b = Bindings::new();
    for (name, t) in bindings {
        b.bind(name, t, wrt.contains(&name.as_str()));
    }
    let mut session = Session::new(graph);
    session.eval(&b).expect("forward pass");
    let out = session.value(out_id).expect("output value").clone();
    let weights: Vec<f32> = (0..out.len()).map(|i| if out.len() == 1 { 1.0 } else { weight(i) }).collect();
    let seed = Tensor::new(out.shape().to_vec(), weights.clone()).unwrap();
    let grads = session.backward_from(out_id, seed).expect("backward pass");

    // Numeric side.
    let leaves: BTreeMap<String, Value> = bindings
        .iter()
        .map(|(k, t)| (k.clone(), Value::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())))
        .collect();
    let objective = |leaves: &BTreeMap<String, Value>| {
        let e = evaluate(graph, leaves);
        let v = &e.values[out_id.0];
        let s: f64 = v.data.iter().zip(&weights).map(|(a, &w)| a * w as f64).sum();
        (s, e.pattern)
    };
    let (_, base_pattern) = objective(&leaves);

    let mut reports = Vec::new();
    for &name in wrt {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for `{name}`"));
        let mut work = leaves.clone();
        let (mut diff2, mut num2, mut ana2) = (0.0, 0.0, 0.0);
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..analytic.len() {
            let orig = work[name].data[i];
            work.get_mut(name).unwrap().data[i] = orig + h;
            let (plus, pp) = objective(&work);
            work.get_mut(name).unwrap().data[i] = orig - h;
            let (minus, pm) = objective(&work);
            work.get_mut(name).unwrap().data[i] = orig;
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i] as f64;
            diff2 += (a - numeric).powi(2);
            num2 += numeric * numeric;
            ana2 += a * a;
            checked += 1;
        }
        let scale = num2.sqrt().max(ana2.sqrt());
        reports.push(LeafReport {
            name: name.to_string(),
            rel_error: if scale < VANISHING { 0.0 } else { diff2.sqrt() / scale },
            abs_error: diff2.sqrt(),
            checked,
            skipped,
            numeric_norm: num2.sqrt(),
            analytic_norm: ana2.sqrt(),
        });
    }
    Report { leaves: reports }
}

/// Deterministic weights in [0.5, 1.5) so that no output entry cancels out.
fn weight(i: usize) -> f32 {
    let x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
    0.5 + (x as f32) / (1u64 << 24) as f32
}
