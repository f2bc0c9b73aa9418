use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{AutodiffError, Gradients, Result};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// Per parameter: `g' = g + wd * p` (only for names ending in `weight`),
/// `v = momentum * v + g'`, `p = p - lr * v`. Velocities persist across calls.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(AutodiffError::Shape {
                op: "sgd",
                dims: Vec::new(),
                detail: "momentum must lie in [0, 1) and weight decay must be >= 0".into(),
            });
        }
        Ok(Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &Gradients, lr: f32) -> Result<()> {
        check_step("sgd", params, grads, lr)?;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let decay = if name.ends_with("weight") { self.weight_decay } else { 0.0 };
            let v = self
                .velocity
                .entry(name.into())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let step = gv + decay * *pv;
                *vv = self.momentum * *vv + step;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Validates a whole update before anything is mutated.
fn check_step(op: &'static str, params: &BTreeMap<String, Tensor>, grads: &Gradients, lr: f32) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(AutodiffError::Shape {
            op,
            dims: Vec::new(),
            detail: "learning rate must be >= 0".into(),
        });
    }
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownName(name.into()))?;
        if p.shape() != g.shape() {
            return Err(AutodiffError::Shape {
                op,
                dims: vec![p.shape().to_vec(), g.shape().to_vec()],
                detail: alloc::format!("gradient for `{name}` does not match its parameter"),
            });
        }
    }
    Ok(())
}

/// Adam with bias correction and decoupled weight decay.
///
/// Per parameter at step `t` (1-based): `m = b1 m + (1-b1) g`,
/// `v = b2 v + (1-b2) g^2`, `p -= lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`,
/// then `p -= lr * wd * p` for names ending in `weight`.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    t: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) || !(weight_decay >= 0.0) {
            return Err(AutodiffError::Shape {
                op: "adam",
                dims: Vec::new(),
                detail: "betas must lie in [0, 1), eps must be > 0 and weight decay >= 0".into(),
            });
        }
        Ok(Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &Gradients, lr: f32) -> Result<()> {
        check_step("adam", params, grads, lr)?;
        self.t += 1;
        let c1 = 1.0 - libm::powf(self.beta1, self.t as f32);
        let c2 = 1.0 - libm::powf(self.beta2, self.t as f32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let decay = if name.ends_with("weight") { self.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(name.into())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / c1) / (libm::sqrtf(*vv / c2) + self.eps);
                *pv -= lr * (update + decay * *pv);
            }
        }
        Ok(())
    }
}
