//! Direct f64 evaluation of a graph, one op at a time, written from the op
//! definitions with plain loops.

use std::collections::BTreeMap;

use aetransfer_core::autodiff::{Graph, NodeId, Op};

#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Value {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Value { shape, data }
    }
}

/// Discrete choices made during evaluation (ReLU signs, max-pool winners).
/// Finite differences are only meaningful when both probes make the same
/// choices.
pub type Pattern = Vec<u64>;

pub struct Evaluation {
    pub values: Vec<Value>,
    pub pattern: Pattern,
}

pub fn evaluate(graph: &Graph, leaves: &BTreeMap<String, Value>) -> Evaluation {
    let mut values: Vec<Value> = Vec::with_capacity(graph.nodes().len());
    let mut pattern = Vec::new();
    for op in graph.nodes() {
        let get = |id: NodeId| -> &Value { &values[id.0] };
        let v = match op {
            Op::Input { name } | Op::Param { name } => leaves.get(name).unwrap_or_else(|| panic!("leaf `{name}` not bound")).clone(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => conv(get(*input), get(*weight), bias.map(|b| get(b)), *stride, *padding),
            Op::Linear { input, weight, bias } => {
                let (x, w) = (get(*input), get(*weight));
                let (i, o) = (w.shape[0], w.shape[1]);
                let rows = x.data.len() / i;
                let mut out = vec![0.0; rows * o];
                for r in 0..rows {
                    for c in 0..o {
                        let mut s = bias.map_or(0.0, |b| get(b).data[c]);
                        for k in 0..i {
                            s += x.data[r * i + k] * w.data[k * o + c];
                        }
                        out[r * o + c] = s;
                    }
                }
                let mut shape = x.shape.clone();
                *shape.last_mut().unwrap() = o;
                Value::new(shape, out)
            }
            Op::Relu { input } => {
                let x = get(*input);
                pattern.extend(x.data.iter().map(|&v| (v > 0.0) as u64));
                Value::new(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())
            }
            Op::MaxPool2d { input, size } => {
                let x = get(*input);
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (h / size, w / size);
                let mut out = Vec::new();
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    let idx = p * h * w + (oy * size + dy) * w + ox * size + dx;
                                    if x.data[idx] > best.0 {
                                        best = (x.data[idx], idx);
                                    }
                                }
                            }
                            pattern.push(best.1 as u64);
                            out.push(best.0);
                        }
                    }
                }
                Value::new(vec![n, c, oh, ow], out)
            }
            Op::GlobalAvgPool { input } => {
                let x = get(*input);
                let (n, c) = (x.shape[0], x.shape[1]);
                let hw = x.shape[2] * x.shape[3];
                let out = x.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
                Value::new(vec![n, c], out)
            }
            Op::LayerNorm { input, gamma, beta, eps } => {
                let (x, g, b) = (get(*input), get(*gamma), get(*beta));
                let d = *x.shape.last().unwrap();
                let mut out = Vec::with_capacity(x.data.len());
                for row in x.data.chunks(d) {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let sd = (var + *eps as f64).sqrt();
                    for j in 0..d {
                        out.push((row[j] - mean) / sd * g.data[j] + b.data[j]);
                    }
                }
                Value::new(x.shape.clone(), out)
            }
            Op::Softmax { input } => {
                let x = get(*input);
                let d = *x.shape.last().unwrap();
                Value::new(x.shape.clone(), x.data.chunks(d).flat_map(softmax).collect())
            }
            Op::Attention { query, key, value, heads } => attention(get(*query), get(*key), get(*value), *heads),
            Op::CrossEntropy { logits, targets } => {
                let (z, t) = (get(*logits), get(*targets));
                let k = *z.shape.last().unwrap();
                let rows = z.data.len() / k;
                let mut total = 0.0;
                for (zr, tr) in z.data.chunks(k).zip(t.data.chunks(k)) {
                    let p = softmax(zr);
                    total -= tr.iter().zip(&p).map(|(a, b)| a * b.ln()).sum::<f64>();
                }
                Value::new(vec![], vec![total / rows as f64])
            }
            Op::Add { lhs, rhs } => {
                let (a, b) = (get(*lhs), get(*rhs));
                let m = b.data.len();
                Value::new(a.shape.clone(), a.data.iter().enumerate().map(|(i, v)| v + b.data[i % m]).collect())
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (get(*lhs), get(*rhs));
                Value::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
            }
            Op::Sum { input } => Value::new(vec![], vec![get(*input).data.iter().sum()]),
            Op::Reshape { input, dims } => {
                let x = get(*input);
                let mut shape = vec![x.shape[0]];
                shape.extend(dims);
                Value::new(shape, x.data.clone())
            }
            Op::Tokens { input } => {
                let x = get(*input);
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let mut out = vec![0.0; x.data.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..h * w {
                            out[(b * h * w + p) * c + ch] = x.data[(b * c + ch) * h * w + p];
                        }
                    }
                }
                Value::new(vec![n, h * w, c], out)
            }
            Op::MeanTokens { input } => {
                let x = get(*input);
                let (n, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
                let mut out = vec![0.0; n * d];
                for b in 0..n {
                    for i in 0..t {
                        for j in 0..d {
                            out[b * d + j] += x.data[(b * t + i) * d + j] / t as f64;
                        }
                    }
                }
                Value::new(vec![n, d], out)
            }
            Op::Affine { input, scale, shift } => {
                let x = get(*input);
                Value::new(x.shape.clone(), x.data.iter().map(|v| v * *scale as f64 + *shift as f64).collect())
            }
        };
        values.push(v);
    }
    Evaluation { values, pattern }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn conv(x: &Value, w: &Value, b: Option<&Value>, stride: usize, pad: usize) -> Value {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b_ in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data[oc]);
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data[((b_ * c + ic) * h + iy as usize) * wd + ix as usize];
                                s += xv * w.data[((oc * c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((b_ * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Value::new(vec![n, o, oh, ow], out)
}

fn attention(q: &Value, k: &Value, v: &Value, heads: usize) -> Value {
    let (n, t, d) = (q.shape[0], q.shape[1], q.shape[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.data.len()];
    for b in 0..n {
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|e| q.data[(b * t + i) * d + h * dh + e] * k.data[(b * t + j) * d + h * dh + e]).sum::<f64>() * scale)
                    .collect();
                let p = softmax(&scores);
                for e in 0..dh {
                    out[(b * t + i) * d + h * dh + e] = (0..t).map(|j| p[j] * v.data[(b * t + j) * d + h * dh + e]).sum();
                }
            }
        }
    }
    Value::new(q.shape.clone(), out)
}
