//! Reverse-mode automatic differentiation over a static graph of dense ops.
//!
//! A [`Graph`] is built once (define-then-run). Each [`Session`] borrows the
//! graph immutably and owns the activations of one evaluation, so any number of
//! sessions can evaluate the same graph concurrently.

mod kernels;
mod optim;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

pub use optim::{Adam, Sgd};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch ({detail}), operand dims {dims:?}")]
    Shape {
        op: &'static str,
        dims: Vec<Vec<usize>>,
        detail: String,
    },
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("no input, parameter or output named `{0}`")]
    UnknownName(String),
    #[error("name `{0}` is already used in this graph")]
    DuplicateName(String),
    #[error("backward called before a forward pass")]
    BackwardBeforeForward,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("gradient seed has shape {got:?}, node has shape {expected:?}")]
    SeedShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node {0} does not exist")]
    UnknownNode(usize),
}

pub type Result<T> = core::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// One recorded operation. Operand ids always refer to earlier nodes, so the
/// node list is a topological order.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Named leaf bound per evaluation (images, targets).
    Input { name: String },
    /// Named trainable leaf.
    Param { name: String },
    /// `[N,C,H,W] * [O,C,K,K] (+ [O]) -> [N,O,H',W']`.
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    /// `[.., I] x [I,O] (+ [O]) -> [.., O]`.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Relu { input: NodeId },
    /// Non-overlapping `size x size` max pooling on `[N,C,H,W]`.
    MaxPool2d { input: NodeId, size: usize },
    /// `[N,C,H,W] -> [N,C]`.
    GlobalAvgPool { input: NodeId },
    /// Normalizes over the last dimension.
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    },
    /// Softmax over the last dimension.
    Softmax { input: NodeId },
    /// Multi-head scaled dot-product attention on `[N,T,D]` operands.
    Attention {
        query: NodeId,
        key: NodeId,
        value: NodeId,
        heads: usize,
    },
    /// Mean over the batch of `-sum_k t_k log softmax(z)_k`; `targets` gets no gradient.
    CrossEntropy { logits: NodeId, targets: NodeId },
    /// Elementwise sum; `rhs` may match a trailing suffix of `lhs` and is broadcast.
    Add { lhs: NodeId, rhs: NodeId },
    /// Elementwise product of equal shapes.
    Mul { lhs: NodeId, rhs: NodeId },
    /// Sum of all entries, producing a scalar.
    Sum { input: NodeId },
    /// Keeps the leading (batch) dimension and reshapes the rest to `dims`.
    Reshape { input: NodeId, dims: Vec<usize> },
    /// `[N,C,H,W] -> [N,H*W,C]`.
    Tokens { input: NodeId },
    /// `[N,T,D] -> [N,D]`.
    MeanTokens { input: NodeId },
    /// `x * scale + shift` with constant coefficients.
    Affine {
        input: NodeId,
        scale: f32,
        shift: f32,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu { .. } => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Tokens { .. } => "tokens",
            Op::MeanTokens { .. } => "mean_tokens",
            Op::Affine { .. } => "affine",
        }
    }

    /// Operand node ids in a fixed order.
    pub fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Param { .. } => Vec::new(),
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::Linear {
                input, weight, bias, ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::Attention {
                query, key, value, ..
            } => vec![query, key, value],
            Op::CrossEntropy { logits, targets } => vec![logits, targets],
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => vec![lhs, rhs],
            Op::Relu { input }
            | Op::MaxPool2d { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Softmax { input }
            | Op::Sum { input }
            | Op::Reshape { input, .. }
            | Op::Tokens { input }
            | Op::MeanTokens { input }
            | Op::Affine { input, .. } => vec![input],
        }
    }
}

/// Static computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn op(&self, id: NodeId) -> Option<&Op> {
        self.nodes.get(id.0)
    }

    /// Names of parameter leaves in graph order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Param { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.operands().iter().all(|o| o.0 < self.nodes.len()));
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, name: &str, op: Op) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(AutodiffError::DuplicateName(name.to_string()));
        }
        let id = self.push(op);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, name: &str) -> Result<NodeId> {
        self.push_leaf(
            name,
            Op::Input {
                name: name.to_string(),
            },
        )
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        self.push_leaf(
            name,
            Op::Param {
                name: name.to_string(),
            },
        )
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(id.0));
        }
        if self.outputs.insert(name.to_string(), id).is_some() {
            return Err(AutodiffError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.push(Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> NodeId {
        self.push(Op::Linear {
            input,
            weight,
            bias,
        })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Relu { input })
    }

    pub fn max_pool2d(&mut self, input: NodeId, size: usize) -> NodeId {
        self.push(Op::MaxPool2d { input, size })
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool { input })
    }

    pub fn layer_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> NodeId {
        self.push(Op::LayerNorm {
            input,
            gamma,
            beta,
            eps,
        })
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Softmax { input })
    }

    pub fn attention(&mut self, query: NodeId, key: NodeId, value: NodeId, heads: usize) -> NodeId {
        self.push(Op::Attention {
            query,
            key,
            value,
            heads,
        })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::CrossEntropy { logits, targets })
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push(Op::Add { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push(Op::Mul { lhs, rhs })
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Sum { input })
    }

    pub fn reshape(&mut self, input: NodeId, dims: Vec<usize>) -> NodeId {
        self.push(Op::Reshape { input, dims })
    }

    pub fn tokens(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Tokens { input })
    }

    pub fn mean_tokens(&mut self, input: NodeId) -> NodeId {
        self.push(Op::MeanTokens { input })
    }

    pub fn affine(&mut self, input: NodeId, scale: f32, shift: f32) -> NodeId {
        self.push(Op::Affine {
            input,
            scale,
            shift,
        })
    }

    /// Evaluates the graph once and returns every marked output.
    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<BTreeMap<String, Tensor>> {
        let mut session = Session::new(self);
        session.eval(bindings)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), session.values[id.0].clone()))
            .collect())
    }
}

#[derive(Clone, Copy)]
struct Binding<'a> {
    tensor: &'a Tensor,
    requires_grad: bool,
}

/// Named tensors bound to the leaves of a graph for one evaluation.
#[derive(Clone, Default)]
pub struct Bindings<'a> {
    entries: BTreeMap<String, Binding<'a>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &str, tensor: &'a Tensor, requires_grad: bool) -> &mut Self {
        self.entries.insert(
            name.to_string(),
            Binding {
                tensor,
                requires_grad,
            },
        );
        self
    }

    pub fn with(mut self, name: &str, tensor: &'a Tensor, requires_grad: bool) -> Self {
        self.bind(name, tensor, requires_grad);
        self
    }
}

/// Gradients of the leaves that were bound with `requires_grad`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: &str, grad: Tensor) {
        self.grads.insert(name.to_string(), grad);
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        self.grads.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// l2 norm over every gradient entry.
    pub fn global_norm(&self) -> f32 {
        let sq: f64 = self.grads.values().flat_map(|g| g.data()).map(|&v| v as f64 * v as f64).sum();
        libm::sqrt(sq) as f32
    }

    /// Scales all gradients so the global norm is at most `max_norm`; returns
    /// the norm before scaling.
    pub fn clip_global_norm(&mut self, max_norm: f32) -> f32 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for g in self.grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

/// Op-specific state kept from the forward pass.
#[derive(Clone, Debug)]
enum Saved {
    None,
    Indices(Vec<u32>),
    Norm { mean: Vec<f32>, rstd: Vec<f32> },
    Probs(Vec<f32>),
}

/// Activations of one evaluation of a graph.
pub struct Session<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
    saved: Vec<Saved>,
    tracks: Vec<bool>,
    leaf_grad: Vec<bool>,
    evaluated: bool,
}

fn shape_err(op: &'static str, dims: &[&[usize]], detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        dims: dims.iter().map(|d| d.to_vec()).collect(),
        detail: detail.into(),
    }
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Session {
            graph,
            values: Vec::new(),
            saved: Vec::new(),
            tracks: Vec::new(),
            leaf_grad: Vec::new(),
            evaluated: false,
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Runs the forward pass, replacing any previous activations.
    pub fn eval(&mut self, bindings: &Bindings<'_>) -> Result<()> {
        self.evaluated = false;
        let n = self.graph.nodes.len();
        self.values.clear();
        self.saved.clear();
        self.tracks = vec![false; n];
        self.leaf_grad = vec![false; n];
        for (idx, op) in self.graph.nodes.iter().enumerate() {
            let (value, saved) = match op {
                Op::Input { name } | Op::Param { name } => {
                    let b = bindings
                        .entries
                        .get(name)
                        .ok_or_else(|| AutodiffError::Unbound(name.clone()))?;
                    self.leaf_grad[idx] = b.requires_grad;
                    self.tracks[idx] = b.requires_grad;
                    (b.tensor.clone(), Saved::None)
                }
                _ => {
                    self.tracks[idx] = op.operands().iter().any(|o| self.tracks[o.0]);
                    self.forward_op(op)?
                }
            };
            if !value.all_finite() {
                return Err(AutodiffError::NonFinite { op: op.kind() });
            }
            self.values.push(value);
            self.saved.push(saved);
        }
        self.evaluated = true;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if !self.evaluated {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        self.values.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn output(&self, name: &str) -> Result<&Tensor> {
        let id = self
            .graph
            .output_id(name)
            .ok_or_else(|| AutodiffError::UnknownName(name.to_string()))?;
        self.value(id)
    }

    /// All marked outputs of the last evaluation.
    pub fn outputs(&self) -> Result<BTreeMap<&str, &Tensor>> {
        self.graph
            .outputs
            .iter()
            .map(|(k, id)| Ok((k.as_str(), self.value(*id)?)))
            .collect()
    }

    /// Gradients of a scalar node with respect to every leaf bound with
    /// `requires_grad`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.evaluated {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let v = self.value(loss)?;
        if v.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
        }
        self.backward_from(loss, Tensor::full(v.shape().to_vec(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (the upstream gradient of
    /// `node`) back to the leaves.
    pub fn backward_from(&self, node: NodeId, seed: Tensor) -> Result<Gradients> {
        if !self.evaluated {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let v = self.value(node)?;
        if v.shape() != seed.shape() {
            return Err(AutodiffError::SeedShape {
                expected: v.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; node.0 + 1];
        grads[node.0] = Some(seed.into_data());
        let mut out = Gradients::default();
        for idx in (0..=node.0).rev() {
            if !self.tracks[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let op = &self.graph.nodes[idx];
            match op {
                Op::Input { name } | Op::Param { name } => {
                    if self.leaf_grad[idx] {
                        let t = Tensor::new(self.values[idx].shape().to_vec(), g)?;
                        out.grads.insert(name.clone(), t);
                    }
                }
                _ => self.backward_op(idx, op, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<f32>>], id: NodeId) -> Option<&'a mut [f32]> {
        if !self.tracks[id.0] {
            return None;
        }
        let len = self.values[id.0].len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn forward_op(&self, op: &Op) -> Result<(Tensor, Saved)> {
        let val = |id: &NodeId| &self.values[id.0];
        let kind = op.kind();
        let out = match op {
            Op::Input { .. } | Op::Param { .. } => unreachable!("leaves are bound, not computed"),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (x, w) = (val(input), val(weight));
                let geom = kernels::ConvGeom::new(x.shape(), w.shape(), *stride, *padding)
                    .ok_or_else(|| shape_err(kind, &[x.shape(), w.shape()], "expected [N,C,H,W] and [O,C,K,K] with a valid output size"))?;
                if let Some(b) = bias {
                    if val(b).shape() != [geom.out_c] {
                        return Err(shape_err(kind, &[w.shape(), val(b).shape()], "bias must be [O]"));
                    }
                }
                let data = kernels::conv2d_forward(&geom, x.data(), w.data(), bias.map(|b| val(&b).data()));
                (Tensor::new(geom.out_shape(), data)?, Saved::None)
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(input), val(weight));
                let (rows, ok) = match (x.shape().last(), w.shape()) {
                    (Some(&i), &[wi, _]) if i == wi => (x.len() / i.max(1), true),
                    _ => (0, false),
                };
                if !ok {
                    return Err(shape_err(kind, &[x.shape(), w.shape()], "expected [..,I] and [I,O]"));
                }
                let (inp, outp) = (w.shape()[0], w.shape()[1]);
                if let Some(b) = bias {
                    if val(b).shape() != [outp] {
                        return Err(shape_err(kind, &[w.shape(), val(b).shape()], "bias must be [O]"));
                    }
                }
                let data = kernels::linear_forward(rows, inp, outp, x.data(), w.data(), bias.map(|b| val(&b).data()));
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = outp;
                (Tensor::new(shape, data)?, Saved::None)
            }
            Op::Relu { input } => {
                let x = val(input);
                let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                (Tensor::new(x.shape().to_vec(), data)?, Saved::None)
            }
            Op::MaxPool2d { input, size } => {
                let x = val(input);
                let s = x.shape();
                if s.len() != 4 || *size == 0 || s[2] % size != 0 || s[3] % size != 0 {
                    return Err(shape_err(kind, &[s], "expected [N,C,H,W] with H and W divisible by the pool size"));
                }
                let (data, idx) = kernels::max_pool_forward(s, *size, x.data());
                let shape = vec![s[0], s[1], s[2] / size, s[3] / size];
                (Tensor::new(shape, data)?, Saved::Indices(idx))
            }
            Op::GlobalAvgPool { input } => {
                let x = val(input);
                let s = x.shape();
                if s.len() != 4 || s[2] * s[3] == 0 {
                    return Err(shape_err(kind, &[s], "expected non-empty [N,C,H,W]"));
                }
                let hw = s[2] * s[3];
                let data = x
                    .data()
                    .chunks_exact(hw)
                    .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
                    .collect();
                (Tensor::new(vec![s[0], s[1]], data)?, Saved::None)
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let (x, g, b) = (val(input), val(gamma), val(beta));
                let d = match x.shape().last() {
                    Some(&d) if d > 0 && g.shape() == [d] && b.shape() == [d] => d,
                    _ => return Err(shape_err(kind, &[x.shape(), g.shape(), b.shape()], "expected [..,D], [D], [D]")),
                };
                let (data, mean, rstd) = kernels::layer_norm_forward(d, *eps, x.data(), g.data(), b.data());
                (Tensor::new(x.shape().to_vec(), data)?, Saved::Norm { mean, rstd })
            }
            Op::Softmax { input } => {
                let x = val(input);
                let d = match x.shape().last() {
                    Some(&d) if d > 0 => d,
                    _ => return Err(shape_err(kind, &[x.shape()], "expected a non-empty last dimension")),
                };
                let data = kernels::softmax_rows(d, x.data());
                (Tensor::new(x.shape().to_vec(), data)?, Saved::None)
            }
            Op::Attention {
                query,
                key,
                value,
                heads,
            } => {
                let (q, k, v) = (val(query), val(key), val(value));
                let s = q.shape();
                if s.len() != 3 || k.shape() != s || v.shape() != s || *heads == 0 || s[2] % heads != 0 {
                    return Err(shape_err(kind, &[q.shape(), k.shape(), v.shape()], "expected equal [N,T,D] with D divisible by heads"));
                }
                let dims = kernels::AttnDims {
                    batch: s[0],
                    tokens: s[1],
                    dim: s[2],
                    heads: *heads,
                };
                let (data, probs) = kernels::attention_forward(&dims, q.data(), k.data(), v.data());
                (Tensor::new(s.to_vec(), data)?, Saved::Probs(probs))
            }
            Op::CrossEntropy { logits, targets } => {
                let (z, t) = (val(logits), val(targets));
                if z.shape().len() != 2 || z.shape() != t.shape() || z.shape()[0] == 0 || z.shape()[1] == 0 {
                    return Err(shape_err(kind, &[z.shape(), t.shape()], "expected equal non-empty [N,K]"));
                }
                let k = z.shape()[1];
                let probs = kernels::softmax_rows(k, z.data());
                let loss = kernels::cross_entropy(k, z.data(), t.data());
                (Tensor::scalar(loss), Saved::Probs(probs))
            }
            Op::Add { lhs, rhs } => {
                let (a, b) = (val(lhs), val(rhs));
                if !a.shape().ends_with(b.shape()) || b.is_empty() {
                    return Err(shape_err(kind, &[a.shape(), b.shape()], "rhs must equal a trailing suffix of lhs"));
                }
                let bl = b.len();
                let data = a
                    .data()
                    .chunks_exact(bl)
                    .flat_map(|c| c.iter().zip(b.data()).map(|(x, y)| x + y))
                    .collect();
                (Tensor::new(a.shape().to_vec(), data)?, Saved::None)
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (val(lhs), val(rhs));
                if a.shape() != b.shape() {
                    return Err(shape_err(kind, &[a.shape(), b.shape()], "shapes must be equal"));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                (Tensor::new(a.shape().to_vec(), data)?, Saved::None)
            }
            Op::Sum { input } => {
                let s: f64 = val(input).data().iter().map(|&v| v as f64).sum();
                (Tensor::scalar(s as f32), Saved::None)
            }
            Op::Reshape { input, dims } => {
                let x = val(input);
                let lead = x.shape().first().copied();
                let want: usize = dims.iter().product();
                match lead {
                    Some(n) if n * want == x.len() => {
                        let mut shape = vec![n];
                        shape.extend_from_slice(dims);
                        (x.clone().reshaped(shape)?, Saved::None)
                    }
                    _ => {
                        return Err(shape_err(kind, &[x.shape(), dims], "element count must be preserved"));
                    }
                }
            }
            Op::Tokens { input } => {
                let x = val(input);
                let s = x.shape();
                if s.len() != 4 {
                    return Err(shape_err(kind, &[s], "expected [N,C,H,W]"));
                }
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let data = kernels::transpose_inner(n, c, hw, x.data());
                (Tensor::new(vec![n, hw, c], data)?, Saved::None)
            }
            Op::MeanTokens { input } => {
                let x = val(input);
                let s = x.shape();
                if s.len() != 3 || s[1] == 0 {
                    return Err(shape_err(kind, &[s], "expected non-empty [N,T,D]"));
                }
                let data = kernels::mean_tokens(s[0], s[1], s[2], x.data());
                (Tensor::new(vec![s[0], s[2]], data)?, Saved::None)
            }
            Op::Affine {
                input,
                scale,
                shift,
            } => {
                let x = val(input);
                let data = x.data().iter().map(|&v| v * scale + shift).collect();
                (Tensor::new(x.shape().to_vec(), data)?, Saved::None)
            }
        };
        Ok(out)
    }

    fn backward_op(&self, idx: usize, op: &Op, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |id: &NodeId| &self.values[id.0];
        match op {
            Op::Input { .. } | Op::Param { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (x, w) = (val(input), val(weight));
                let geom = kernels::ConvGeom::new(x.shape(), w.shape(), *stride, *padding).expect("validated in forward");
                if let Some(dw) = self.accumulate(grads, *weight) {
                    kernels::conv2d_backward_weight(&geom, x.data(), g, dw);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.accumulate(grads, *b) {
                        let hw = geom.out_h * geom.out_w;
                        for (i, chunk) in g.chunks_exact(hw).enumerate() {
                            db[i % geom.out_c] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                        }
                    }
                }
                if let Some(dx) = self.accumulate(grads, *input) {
                    kernels::conv2d_backward_input(&geom, w.data(), g, dx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(input), val(weight));
                let (inp, outp) = (w.shape()[0], w.shape()[1]);
                let rows = x.len() / inp.max(1);
                if let Some(dw) = self.accumulate(grads, *weight) {
                    kernels::linear_backward_weight(rows, inp, outp, x.data(), g, dw);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.accumulate(grads, *b) {
                        let mut acc = vec![0.0f64; outp];
                        for row in g.chunks_exact(outp) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v as f64;
                            }
                        }
                        for (d, a) in db.iter_mut().zip(acc) {
                            *d += a as f32;
                        }
                    }
                }
                if let Some(dx) = self.accumulate(grads, *input) {
                    kernels::linear_backward_input(rows, inp, outp, w.data(), g, dx);
                }
            }
            Op::Relu { input } => {
                let y = &self.values[idx];
                if let Some(dx) = self.accumulate(grads, *input) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y.data()) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MaxPool2d { input, .. } => {
                let Saved::Indices(ix) = &self.saved[idx] else {
                    unreachable!()
                };
                if let Some(dx) = self.accumulate(grads, *input) {
                    for (&i, &gv) in ix.iter().zip(g) {
                        dx[i as usize] += gv;
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let s = val(input).shape();
                let hw = s[2] * s[3];
                if let Some(dx) = self.accumulate(grads, *input) {
                    let inv = 1.0 / hw as f32;
                    for (chunk, &gv) in dx.chunks_exact_mut(hw).zip(g) {
                        for d in chunk {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                input, gamma, beta, ..
            } => {
                let Saved::Norm { mean, rstd } = &self.saved[idx] else {
                    unreachable!()
                };
                let x = val(input);
                let d = *x.shape().last().unwrap();
                let gm = val(gamma).data();
                if let Some(dg) = self.accumulate(grads, *gamma) {
                    kernels::layer_norm_backward_gamma(d, x.data(), mean, rstd, g, dg);
                }
                if let Some(db) = self.accumulate(grads, *beta) {
                    let mut acc = vec![0.0f64; d];
                    for row in g.chunks_exact(d) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v as f64;
                        }
                    }
                    for (dv, a) in db.iter_mut().zip(acc) {
                        *dv += a as f32;
                    }
                }
                if let Some(dx) = self.accumulate(grads, *input) {
                    kernels::layer_norm_backward_input(d, x.data(), mean, rstd, gm, g, dx);
                }
            }
            Op::Softmax { input } => {
                let y = &self.values[idx];
                let d = *y.shape().last().unwrap();
                if let Some(dx) = self.accumulate(grads, *input) {
                    kernels::softmax_backward(d, y.data(), g, dx);
                }
            }
            Op::Attention {
                query,
                key,
                value,
                heads,
            } => {
                let Saved::Probs(probs) = &self.saved[idx] else {
                    unreachable!()
                };
                let (q, k, v) = (val(query), val(key), val(value));
                let s = q.shape();
                let dims = kernels::AttnDims {
                    batch: s[0],
                    tokens: s[1],
                    dim: s[2],
                    heads: *heads,
                };
                let (dq, dk, dv) = kernels::attention_backward(&dims, q.data(), k.data(), v.data(), probs, g);
                for (id, src) in [(query, dq), (key, dk), (value, dv)] {
                    if let Some(d) = self.accumulate(grads, *id) {
                        for (a, b) in d.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let Saved::Probs(probs) = &self.saved[idx] else {
                    unreachable!()
                };
                let t = val(targets);
                let s = t.shape();
                let (n, k) = (s[0], s[1]);
                let scale = g[0] / n as f32;
                if let Some(dz) = self.accumulate(grads, *logits) {
                    for ((dz_row, p_row), t_row) in dz.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(t.data().chunks_exact(k)) {
                        let mass: f32 = t_row.iter().sum();
                        for ((d, &p), &tv) in dz_row.iter_mut().zip(p_row).zip(t_row) {
                            *d += scale * (p * mass - tv);
                        }
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                if let Some(da) = self.accumulate(grads, *lhs) {
                    for (a, &b) in da.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                let bl = val(rhs).len();
                if let Some(db) = self.accumulate(grads, *rhs) {
                    let mut acc = vec![0.0f64; bl];
                    for chunk in g.chunks_exact(bl) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a += v as f64;
                        }
                    }
                    for (d, a) in db.iter_mut().zip(acc) {
                        *d += a as f32;
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (val(lhs), val(rhs));
                if let Some(da) = self.accumulate(grads, *lhs) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(b.data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.accumulate(grads, *rhs) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(a.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(dx) = self.accumulate(grads, *input) {
                    for d in dx {
                        *d += g[0];
                    }
                }
            }
            Op::Reshape { input, .. } => {
                if let Some(dx) = self.accumulate(grads, *input) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Tokens { input } => {
                let s = val(input).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if let Some(dx) = self.accumulate(grads, *input) {
                    let back = kernels::transpose_inner(n, hw, c, g);
                    for (d, b) in dx.iter_mut().zip(back) {
                        *d += b;
                    }
                }
            }
            Op::MeanTokens { input } => {
                let s = val(input).shape();
                let (t, d) = (s[1], s[2]);
                if let Some(dx) = self.accumulate(grads, *input) {
                    let inv = 1.0 / t as f32;
                    for (sample, grow) in dx.chunks_exact_mut(t * d).zip(g.chunks_exact(d)) {
                        for tok in sample.chunks_exact_mut(d) {
                            for (a, &gv) in tok.iter_mut().zip(grow) {
                                *a += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::Affine { input, scale, .. } => {
                if let Some(dx) = self.accumulate(grads, *input) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * scale;
                    }
                }
            }
        }
    }
}
