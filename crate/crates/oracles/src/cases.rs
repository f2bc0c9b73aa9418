//! Gradient-check cases: one per layer kind plus three small end-to-end
//! networks with their training loss.

use std::collections::BTreeMap;

use aetransfer_core::autodiff::{Graph, NodeId};
use aetransfer_core::model::{Network, NetworkDef, INPUT, LOSS, TARGETS};
use aetransfer_core::{rng, Tensor};
use rand::Rng;

use crate::gradcheck::{check, Report};

/// Finite-difference step used by the shipped cases.
pub const H: f64 = 1e-5;

pub struct GradCase {
    pub name: String,
    pub graph: Graph,
    pub bindings: BTreeMap<String, Tensor>,
    pub wrt: Vec<String>,
    pub output: String,
}

impl GradCase {
    pub fn run(&self) -> Report {
        let wrt: Vec<&str> = self.wrt.iter().map(String::as_str).collect();
        check(&self.graph, &self.bindings, &wrt, &self.output, H)
    }
}

fn random(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    let mut r = rng::stream(seed, &[rng::label("gradcheck")]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

struct Builder {
    graph: Graph,
    bindings: BTreeMap<String, Tensor>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            graph: Graph::new(),
            bindings: BTreeMap::new(),
        }
    }

    fn leaf(&mut self, name: &str, shape: &[usize], scale: f32) -> NodeId {
        let seed = self.bindings.len() as u64 + 1;
        self.bindings.insert(name.into(), random(shape, seed, scale));
        self.graph.param(name).unwrap()
    }

    fn finish(mut self, name: String, out: NodeId) -> GradCase {
        self.graph.mark_output("out", out).unwrap();
        GradCase {
            name,
            wrt: self.bindings.keys().cloned().collect(),
            graph: self.graph,
            bindings: self.bindings,
            output: "out".into(),
        }
    }
}

/// Every differentiable layer kind of the engine.
pub fn layer_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    for (stride, pad, k) in [(1, 1, 3), (2, 0, 3), (2, 1, 3), (1, 0, 1), (4, 0, 4)] {
        let mut c = Builder::new();
        let x = c.leaf("x", &[2, 3, 8, 8], 1.0);
        let w = c.leaf("w", &[4, 3, k, k], 0.5);
        let b = c.leaf("b", &[4], 0.5);
        let y = c.graph.conv2d(x, w, Some(b), stride, pad);
        out.push(c.finish(format!("conv2d k{k} s{stride} p{pad}"), y));
    }
    {
        let mut c = Builder::new();
        let x = c.leaf("x", &[2, 3, 4], 1.0);
        let w = c.leaf("w", &[4, 5], 0.5);
        let b = c.leaf("b", &[5], 0.5);
        let y = c.graph.linear(x, w, Some(b));
        out.push(c.finish("linear".into(), y));
    }
    {
        let mut c = Builder::new();
        let x = c.leaf("x", &[3, 7], 1.0);
        let y = c.graph.relu(x);
        out.push(c.finish("relu".into(), y));
    }
    {
        let mut c = Builder::new();
        let x = c.leaf("x", &[2, 2, 6, 6], 1.0);
        let y = c.graph.max_pool2d(x, 2);
        out.push(c.finish("max_pool2d".into(), y));
    }
    {
        let mut c = Builder::new();
        let x = c.leaf("x", &[2, 3, 4, 4], 1.0);
        let y = c.graph.global_avg_pool(x);
        out.push(c.finish("global_avg_pool".into(), y));
    }
    {
        let mut c = Builder::new();
        let x = c.leaf("x", &[2, 3, 6], 2.0);
        let g = c.leaf("gamma", &[6], 1.5);
        let b = c.leaf("beta", &[6], 0.5);
        let y = c.graph.layer_norm(x, g, b, 1e-5);
        out.push(c.finish("layer_norm".into(), y));
    }
    {
        let mut c = Builder::new();
        let x = c.leaf("x", &[3, 5], 2.0);
        let y = c.graph.softmax(x);
        out.push(c.finish("softmax".into(), y));
    }
    {
        let mut c = Builder::new();
        let q = c.leaf("q", &[2, 4, 6], 1.0);
        let k = c.leaf("k", &[2, 4, 6], 1.0);
        let v = c.leaf("v", &[2, 4, 6], 1.0);
        let y = c.graph.attention(q, k, v, 2);
        out.push(c.finish("attention".into(), y));
    }
    {
        let mut g = Graph::new();
        let z = g.param("z").unwrap();
        let t = g.input("t").unwrap();
        let loss = g.cross_entropy(z, t);
        g.mark_output("out", loss).unwrap();
        let mut targets = vec![0.0f32; 15];
        for (row, k) in [(0, 1), (1, 4), (2, 0)] {
            targets[row * 5 + k] = 1.0;
        }
        out.push(GradCase {
            name: "cross_entropy".into(),
            graph: g,
            bindings: BTreeMap::from([
                ("z".to_string(), random(&[3, 5], 1, 2.0)),
                ("t".to_string(), Tensor::new(vec![3, 5], targets).unwrap()),
            ]),
            wrt: vec!["z".into()],
            output: "out".into(),
        });
    }
    for rhs in [vec![2, 3, 4], vec![3, 4], vec![4]] {
        let mut c = Builder::new();
        let a = c.leaf("a", &[2, 3, 4], 1.0);
        let b = c.leaf("b", &rhs, 1.0);
        let y = c.graph.add(a, b);
        out.push(c.finish(format!("add broadcast {rhs:?}"), y));
    }
    {
        let mut c = Builder::new();
        let a = c.leaf("a", &[2, 5], 1.0);
        let b = c.leaf("b", &[2, 5], 1.0);
        let y = c.graph.mul(a, b);
        out.push(c.finish("mul".into(), y));
    }
    {
        let mut c = Builder::new();
        let a = c.leaf("a", &[2, 5], 1.0);
        let s = c.graph.affine(a, 4.0, -2.0);
        let y = c.graph.sum(s);
        out.push(c.finish("affine and sum".into(), y));
    }
    {
        let mut c = Builder::new();
        let x = c.leaf("x", &[2, 3, 2, 2], 1.0);
        let t = c.graph.tokens(x);
        let m = c.graph.mean_tokens(t);
        let w = c.leaf("w", &[2, 3], 1.0);
        let p = c.graph.mul(m, w);
        let r = c.graph.reshape(p, vec![3, 1]);
        out.push(c.finish("tokens, mean_tokens and reshape".into(), r));
    }
    out
}

fn network_case(name: &str, def: NetworkDef, seed: u64) -> GradCase {
    let net = Network::build(&def).unwrap();
    let (classes, c, h, w) = match def {
        NetworkDef::Cnn {
            classes,
            channels,
            height,
            width,
            ..
        }
        | NetworkDef::Vit {
            classes,
            channels,
            height,
            width,
            ..
        } => (classes, channels, height, width),
    };
    let mut bindings: BTreeMap<String, Tensor> = net.init_params(seed).into_iter().collect();
    // Biases start at zero; perturb everything so no gradient is trivially exact.
    for (i, t) in bindings.values_mut().enumerate() {
        let noise = random(t.shape(), seed + 100 + i as u64, 0.05);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let n = 2;
    let mut r = rng::stream(seed, &[7]);
    let image = Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
    let mut targets = vec![0.0f32; n * classes];
    for i in 0..n {
        targets[i * classes + r.random_range(0..classes)] = 1.0;
    }
    bindings.insert(INPUT.into(), image);
    bindings.insert(TARGETS.into(), Tensor::new(vec![n, classes], targets).unwrap());
    GradCase {
        name: name.into(),
        wrt: bindings.keys().filter(|k| k.as_str() != TARGETS).cloned().collect(),
        graph: net.training_graph().clone(),
        bindings,
        output: LOSS.into(),
    }
}

/// Three small randomly initialized networks, checked on input and every
/// parameter.
pub fn network_cases() -> Vec<GradCase> {
    vec![
        network_case(
            "small cnn",
            NetworkDef::Cnn {
                channels: 3,
                height: 8,
                width: 8,
                stages: vec![vec![4], vec![6]],
                classes: 5,
            },
            1,
        ),
        network_case(
            "deeper cnn",
            NetworkDef::Cnn {
                channels: 3,
                height: 8,
                width: 8,
                stages: vec![vec![3, 3], vec![4, 4], vec![5]],
                classes: 4,
            },
            2,
        ),
        network_case(
            "small vit",
            NetworkDef::Vit {
                channels: 3,
                height: 8,
                width: 8,
                patch: 4,
                dim: 8,
                heads: 2,
                layers: 2,
                mlp: 12,
                classes: 5,
            },
            3,
        ),
    ]
}
