use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use super::spec::NetworkDef;
use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;

pub type ParamStore = BTreeMap<String, Tensor>;

pub const INPUT: &str = "image";
pub const TARGETS: &str = "targets";
pub const LOGITS: &str = "logits";
pub const LOSS: &str = "loss";

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f32),
    /// Uniform on `[-b, b]`.
    Uniform(f32),
    Const(f32),
}

/// A built network: an inference graph, a training graph that appends the
/// cross-entropy loss, and the parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    pub(crate) inference: Graph,
    pub(crate) training: Graph,
    params: Vec<(String, Vec<usize>, Init)>,
}

struct Builder {
    g: Graph,
    params: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<NodeId, AutodiffError> {
        let id = self.g.param(&name)?;
        self.params.push((name, shape, init));
        Ok(id)
    }

    fn linear(&mut self, prefix: &str, x: NodeId, inp: usize, out: usize, init: Init) -> Result<NodeId, AutodiffError> {
        let w = self.param(format!("{prefix}.weight"), vec![inp, out], init)?;
        let b = self.param(format!("{prefix}.bias"), vec![out], Init::Const(0.0))?;
        Ok(self.g.linear(x, w, Some(b)))
    }

    fn layer_norm(&mut self, prefix: &str, x: NodeId, dim: usize) -> Result<NodeId, AutodiffError> {
        let g = self.param(format!("{prefix}.gamma"), vec![dim], Init::Const(1.0))?;
        let b = self.param(format!("{prefix}.beta"), vec![dim], Init::Const(0.0))?;
        Ok(self.g.layer_norm(x, g, b, 1e-5))
    }
}

fn he(fan_in: usize) -> f32 {
    libm::sqrtf(2.0 / fan_in as f32)
}

fn fan_in_bound(fan_in: usize) -> f32 {
    libm::sqrtf(1.0 / fan_in as f32)
}

impl Network {
    pub fn build(def: &NetworkDef) -> Result<Network, AutodiffError> {
        let mut b = Builder {
            g: Graph::new(),
            params: Vec::new(),
        };
        let x = b.g.input(INPUT)?;
        // [0,1] -> roughly zero-mean, unit-scale inputs
        let mut h = b.g.affine(x, 4.0, -2.0);
        let logits = match def {
            NetworkDef::Cnn {
                channels,
                stages,
                classes,
                ..
            } => {
                let mut c_in = *channels;
                let mut block = 0;
                for (s, stage) in stages.iter().enumerate() {
                    for &c_out in stage {
                        let w = b.param(format!("conv{block}.weight"), vec![c_out, c_in, 3, 3], Init::Normal(he(c_in * 9)))?;
                        let bias = b.param(format!("conv{block}.bias"), vec![c_out], Init::Const(0.0))?;
                        h = b.g.conv2d(h, w, Some(bias), 1, 1);
                        h = b.g.relu(h);
                        c_in = c_out;
                        block += 1;
                    }
                    if s + 1 < stages.len() {
                        h = b.g.max_pool2d(h, 2);
                    }
                }
                h = b.g.global_avg_pool(h);
                b.linear("head", h, c_in, *classes, Init::Uniform(fan_in_bound(c_in)))?
            }
            NetworkDef::Vit {
                channels,
                height,
                width,
                patch,
                dim,
                heads,
                layers,
                mlp,
                classes,
            } => {
                let (d, tokens) = (*dim, (height / patch) * (width / patch));
                let w = b.param(
                    "patch.weight".into(),
                    vec![d, *channels, *patch, *patch],
                    Init::Normal(libm::sqrtf(1.0 / (channels * patch * patch) as f32)),
                )?;
                let pb = b.param("patch.bias".into(), vec![d], Init::Const(0.0))?;
                h = b.g.conv2d(h, w, Some(pb), *patch, 0);
                h = b.g.tokens(h);
                let pos = b.param("pos_embed".into(), vec![tokens, d], Init::Normal(0.02))?;
                h = b.g.add(h, pos);
                let std = libm::sqrtf(1.0 / d as f32);
                for l in 0..*layers {
                    let p = format!("block{l}");
                    let n1 = b.layer_norm(&format!("{p}.norm1"), h, d)?;
                    let q = b.linear(&format!("{p}.query"), n1, d, d, Init::Normal(std))?;
                    let k = b.linear(&format!("{p}.key"), n1, d, d, Init::Normal(std))?;
                    let v = b.linear(&format!("{p}.value"), n1, d, d, Init::Normal(std))?;
                    let a = b.g.attention(q, k, v, *heads);
                    let a = b.linear(&format!("{p}.proj"), a, d, d, Init::Normal(std / libm::sqrtf(2.0 * *layers as f32)))?;
                    h = b.g.add(h, a);
                    let n2 = b.layer_norm(&format!("{p}.norm2"), h, d)?;
                    let m = b.linear(&format!("{p}.fc1"), n2, d, *mlp, Init::Normal(he(d)))?;
                    let m = b.g.relu(m);
                    let m = b.linear(&format!("{p}.fc2"), m, *mlp, d, Init::Normal(libm::sqrtf(1.0 / *mlp as f32) / libm::sqrtf(2.0 * *layers as f32)))?;
                    h = b.g.add(h, m);
                }
                h = b.layer_norm("norm", h, d)?;
                h = b.g.mean_tokens(h);
                b.linear("head", h, d, *classes, Init::Uniform(fan_in_bound(d)))?
            }
        };
        b.g.mark_output(LOGITS, logits)?;
        let inference = b.g.clone();
        let mut training = b.g;
        let t = training.input(TARGETS)?;
        let loss = training.cross_entropy(logits, t);
        training.mark_output(LOSS, loss)?;
        Ok(Network {
            inference,
            training,
            params: b.params,
        })
    }

    pub fn inference_graph(&self) -> &Graph {
        &self.inference
    }

    pub fn training_graph(&self) -> &Graph {
        &self.training
    }

    pub fn param_shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.params.iter().map(|(n, s, _)| (n.as_str(), s.as_slice()))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// Seeded initialization; each parameter draws from its own stream.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        self.params
            .iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match *init {
                    Init::Const(c) => vec![c; n],
                    Init::Normal(std) => {
                        let mut r = rng::stream(seed, &[rng::label("init"), rng::label(name)]);
                        (0..n).map(|_| std * r.sample::<f32, _>(StandardNormal)).collect()
                    }
                    Init::Uniform(b) => {
                        let mut r = rng::stream(seed, &[rng::label("init"), rng::label(name)]);
                        (0..n).map(|_| r.random_range(-b..=b)).collect()
                    }
                };
                (name.clone(), Tensor::new(shape.clone(), data).expect("shape matches"))
            })
            .collect()
    }
}
