use std::collections::{BTreeMap, BTreeSet};

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation catalog. Binary elementwise ops broadcast their right operand
/// when its shape is a suffix of the left operand's shape, or when it holds a
/// single value.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf { name: Option<String>, trainable: bool },
    Add,
    Sub,
    Mul,
    /// `[.., n, k] × [k, m]`, or batched `[b, n, k] × [b, k, m]`.
    MatMul,
    LeakyRelu { slope: f64 },
    Tanh,
    Sin,
    Cos,
    /// Over the last axis.
    Softmax,
    /// Over the last axis.
    LogSoftmax,
    /// Zero-mean unit-variance over the last axis, variance offset 1e-5, no affine.
    LayerNorm,
    /// `[b, c_in, l] ⊛ [c_out, c_in, k]` with symmetric zero padding.
    Conv1d { pad: usize },
    /// `[b, c, l] → [b, c]`
    GlobalAvgPool,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
    ScaleShift { scale: f64, shift: f64 },
    Sum,
    L1Norm,
    SqL2Norm,
    /// `1(x > 0)`. Its input edge is always a stop edge.
    Heaviside,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::ScaleShift { .. } => "scale_shift",
            Op::Sum => "sum",
            Op::L1Norm => "l1_norm",
            Op::SqL2Norm => "sq_l2_norm",
            Op::Heaviside => "heaviside",
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor,
}

/// Gradients of a scalar seed with respect to every named leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) stop_edges: BTreeSet<(usize, usize)>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn leaf(&mut self, name: Option<String>, trainable: bool, t: Tensor) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if let Some(n) = &name {
            if self.leaves.insert(n.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate leaf name {n:?}")));
            }
        }
        self.nodes.push(Node {
            op: Op::Leaf { name, trainable },
            inputs: Vec::new(),
            value: t,
        });
        Ok(id)
    }

    /// Named, non-trainable leaf (data).
    pub fn input(&mut self, name: &str, t: Tensor) -> Result<NodeId> {
        self.leaf(Some(name.to_string()), false, t)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<NodeId> {
        self.leaf(Some(name.to_string()), true, t)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(None, false, t).expect("anonymous leaves never collide")
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|id| self.value(*id))
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Mark the edge feeding `slot` of `consumer` as gradient-free.
    pub fn stop_edge(&mut self, consumer: NodeId, slot: usize) -> Result<()> {
        let n = self
            .nodes
            .get(consumer.0)
            .ok_or_else(|| Error::invalid(format!("no node {}", consumer.0)))?;
        if slot >= n.inputs.len() {
            return Err(Error::invalid(format!(
                "node {} ({}) has no input slot {slot}",
                consumer.0,
                n.op.name()
            )));
        }
        self.stop_edges.insert((consumer.0, slot));
        Ok(())
    }

    pub fn is_stopped(&self, consumer: NodeId, slot: usize) -> bool {
        self.stop_edges.contains(&(consumer.0, slot))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let idx = self.nodes.len();
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            eval(&op, &vals).map_err(|detail| Error::Shape {
                node: idx,
                op: op.name(),
                detail,
            })?
        };
        let heaviside = matches!(op, Op::Heaviside);
        self.nodes.push(Node { op, inputs, value });
        if heaviside {
            self.stop_edges.insert((idx, 0));
        }
        Ok(NodeId(idx))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.push(Op::LeakyRelu { slope }, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sin, vec![a])
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Cos, vec![a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax, vec![a])
    }

    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm, vec![a])
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, pad: usize) -> Result<NodeId> {
        self.push(Op::Conv1d { pad }, vec![x, w])
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::GlobalAvgPool, vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice { axis, start, len }, vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            vec![a],
        )
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.push(
            Op::Permute {
                perm: perm.to_vec(),
            },
            vec![a],
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "permute",
                detail: format!("transpose needs ≥2 axes, got {:?}", self.value(a).shape()),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn scale_shift(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.push(Op::ScaleShift { scale, shift }, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        self.scale_shift(a, scale, 0.0)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a])
    }

    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L1Norm, vec![a])
    }

    pub fn sq_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SqL2Norm, vec![a])
    }

    pub fn heaviside(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Heaviside, vec![a])
    }

    /// Replace named leaf values and re-evaluate the whole graph.
    ///
    /// Returns the values of every registered output.
    pub fn forward(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        for (name, t) in inputs {
            let id = self
                .leaves
                .get(name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("graph has no leaf named {name:?}")))?;
            let node = &mut self.nodes[id.0];
            if node.value.shape() != t.shape() {
                return Err(Error::Shape {
                    node: id.0,
                    op: "leaf",
                    detail: format!(
                        "input {name:?} expects shape {:?}, got {:?}",
                        node.value.shape(),
                        t.shape()
                    ),
                });
            }
            node.value = t.clone();
        }
        self.recompute(None)?;
        Ok(self
            .outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.value(*id).clone()))
            .collect())
    }

    /// Re-evaluate every non-leaf node in recording order. With `frozen`, an
    /// input reached through a stop edge reads the snapshot value instead of
    /// the live one, which is the forward-mode meaning of a gradient stop.
    pub(crate) fn recompute(&mut self, frozen: Option<&[Tensor]>) -> Result<()> {
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                continue;
            }
            let value = {
                let node = &self.nodes[idx];
                let vals: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(slot, src)| match frozen {
                        Some(snap) if self.stop_edges.contains(&(idx, slot)) => &snap[src.0],
                        _ => &self.nodes[src.0].value,
                    })
                    .collect();
                eval(&node.op, &vals).map_err(|detail| Error::Shape {
                    node: idx,
                    op: node.op.name(),
                    detail,
                })?
            };
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    pub(crate) fn snapshot(&self) -> Vec<Tensor> {
        self.nodes.iter().map(|n| n.value.clone()).collect()
    }

    /// Gradient of the named scalar output with respect to every named leaf.
    /// Leaves the seed does not reach (or reaches only across stop edges) get
    /// exact zero tensors.
    pub fn backward(&self, seed: &str) -> Result<Gradients> {
        let id = self
            .outputs
            .get(seed)
            .copied()
            .or_else(|| self.leaves.get(seed).copied())
            .ok_or_else(|| Error::invalid(format!("no output named {seed:?}")))?;
        self.backward_from(id)
    }

    pub fn backward_from(&self, seed: NodeId) -> Result<Gradients> {
        let grads = self.node_grads(seed)?;
        let mut by_name = BTreeMap::new();
        for (name, id) in &self.leaves {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    pub(crate) fn node_grads(&self, seed: NodeId) -> Result<Vec<Option<Tensor>>> {
        let seed_val = self.value(seed);
        if !seed_val.is_scalar() {
            return Err(Error::invalid(format!(
                "backward seed must be scalar, node {} has shape {:?}",
                seed.0,
                seed_val.shape()
            )));
        }
        // Nodes whose value depends, through live edges, on some named leaf.
        let mut live = vec![false; seed.0 + 1];
        for idx in 0..=seed.0 {
            let node = &self.nodes[idx];
            live[idx] = match &node.op {
                Op::Leaf { name, .. } => name.is_some(),
                _ => node
                    .inputs
                    .iter()
                    .enumerate()
                    .any(|(slot, src)| live[src.0] && !self.stop_edges.contains(&(idx, slot))),
            };
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(Tensor::full(seed_val.shape(), 1.0));
        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .enumerate()
                .map(|(slot, src)| live[src.0] && !self.stop_edges.contains(&(idx, slot)))
                .collect();
            if need.iter().any(|&n| n) {
                let vals: Vec<&Tensor> = node.inputs.iter().map(|s| &self.nodes[s.0].value).collect();
                let input_grads = vjp(&node.op, &vals, &node.value, &g, &need);
                for ((src, ig), &needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                    if !needed {
                        continue;
                    }
                    let Some(ig) = ig else { continue };
                    match &mut grads[src.0] {
                        Some(acc) => {
                            for (a, v) in acc.data.iter_mut().zip(&ig.data) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            // Intermediate gradients are dropped once consumed.
        }
        Ok(grads)
    }

    /// Sign pattern of every leaky-ReLU input; a change between two forward
    /// passes means a perturbation crossed a kink.
    pub(crate) fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { .. } = node.op {
                let x = &self.nodes[node.inputs[0].0].value;
                sig.extend(x.data.iter().map(|&v| v > 0.0));
            }
        }
        sig
    }

    pub(crate) fn leaf_value_mut(&mut self, id: NodeId) -> &mut Tensor {
        &mut self.nodes[id.0].value
    }
}

// ---------------------------------------------------------------------------
// forward rules

fn bcast_period(a: &Tensor, b: &Tensor) -> Result<usize, String> {
    if a.shape == b.shape || b.len() == 1 {
        return Ok(b.len());
    }
    let (sa, sb) = (&a.shape, &b.shape);
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
        return Ok(b.len());
    }
    Err(format!("cannot broadcast {sb:?} onto {sa:?}"))
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, String> {
    let p = bcast_period(a, b)?;
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data[i % p]))
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

enum MatMulKind {
    /// rows × k times k × m
    Flat { rows: usize, k: usize, m: usize },
    Batched { b: usize, n: usize, k: usize, m: usize },
}

fn matmul_kind(a: &Tensor, b: &Tensor) -> Result<MatMulKind, String> {
    if a.ndim() == 0 {
        return Err("matmul needs a non-scalar left operand".into());
    }
    match b.ndim() {
        2 => {
            let k = *a.shape.last().unwrap();
            if k != b.shape[0] {
                return Err(format!("inner dims differ: {:?} × {:?}", a.shape, b.shape));
            }
            Ok(MatMulKind::Flat {
                rows: a.len() / k.max(1),
                k,
                m: b.shape[1],
            })
        }
        3 if a.ndim() == 3 => {
            if a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
                return Err(format!("batched dims differ: {:?} × {:?}", a.shape, b.shape));
            }
            Ok(MatMulKind::Batched {
                b: a.shape[0],
                n: a.shape[1],
                k: a.shape[2],
                m: b.shape[2],
            })
        }
        _ => Err(format!("unsupported matmul shapes {:?} × {:?}", a.shape, b.shape)),
    }
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    match matmul_kind(a, b)? {
        MatMulKind::Flat { rows, k, m } => {
            if k == 0 {
                return Err("zero inner dimension".into());
            }
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = m;
            Ok(Tensor {
                shape,
                data: kernels::matmul(&a.data, &b.data, rows, k, m),
            })
        }
        MatMulKind::Batched { b: nb, n, k, m } => {
            let mut data = Vec::with_capacity(nb * n * m);
            for i in 0..nb {
                data.extend(kernels::matmul(
                    &a.data[i * n * k..(i + 1) * n * k],
                    &b.data[i * k * m..(i + 1) * k * m],
                    n,
                    k,
                    m,
                ));
            }
            Ok(Tensor {
                shape: vec![nb, n, m],
                data,
            })
        }
    }
}

fn last_axis(a: &Tensor) -> Result<usize, String> {
    match a.shape.last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(format!("needs a non-empty last axis, got {:?}", a.shape)),
    }
}

fn softmax_fwd(a: &Tensor) -> Result<Tensor, String> {
    let n = last_axis(a)?;
    let mut data = a.data.clone();
    for row in data.chunks_mut(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

fn log_softmax_fwd(a: &Tensor) -> Result<Tensor, String> {
    let n = last_axis(a)?;
    let mut data = a.data.clone();
    for row in data.chunks_mut(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

fn layer_norm_fwd(a: &Tensor) -> Result<Tensor, String> {
    let n = last_axis(a)?;
    let mut data = a.data.clone();
    for row in data.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

fn conv_dims(x: &Tensor, w: &Tensor, pad: usize) -> Result<ConvDims, String> {
    if x.ndim() != 3 || w.ndim() != 3 {
        return Err(format!("conv1d wants [b,c,l] and [o,c,k], got {:?} and {:?}", x.shape, w.shape));
    }
    if x.shape[1] != w.shape[1] {
        return Err(format!("conv1d channel mismatch: {:?} vs {:?}", x.shape, w.shape));
    }
    let (len, kernel) = (x.shape[2], w.shape[2]);
    if len + 2 * pad < kernel || kernel == 0 {
        return Err(format!("conv1d kernel {kernel} too long for length {len} with pad {pad}"));
    }
    Ok(ConvDims {
        batch: x.shape[0],
        c_in: x.shape[1],
        len,
        c_out: w.shape[0],
        kernel,
        pad,
        out_len: len + 2 * pad - kernel + 1,
    })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<f64>), String> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(format!("{perm:?} is not a permutation of {nd} axes"));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, out))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn eval(op: &Op, x: &[&Tensor]) -> Result<Tensor, String> {
    Ok(match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::Add => binary(x[0], x[1], |a, b| a + b)?,
        Op::Sub => binary(x[0], x[1], |a, b| a - b)?,
        Op::Mul => binary(x[0], x[1], |a, b| a * b)?,
        Op::MatMul => matmul_fwd(x[0], x[1])?,
        Op::LeakyRelu { slope } => unary(x[0], |v| if v > 0.0 { v } else { slope * v }),
        Op::Tanh => unary(x[0], f64::tanh),
        Op::Sin => unary(x[0], f64::sin),
        Op::Cos => unary(x[0], f64::cos),
        Op::Softmax => softmax_fwd(x[0])?,
        Op::LogSoftmax => log_softmax_fwd(x[0])?,
        Op::LayerNorm => layer_norm_fwd(x[0])?,
        Op::Conv1d { pad } => {
            let d = conv_dims(x[0], x[1], *pad)?;
            Tensor {
                shape: vec![d.batch, d.c_out, d.out_len],
                data: kernels::conv1d(&x[0].data, &x[1].data, &d),
            }
        }
        Op::GlobalAvgPool => {
            let a = x[0];
            if a.ndim() != 3 || a.shape[2] == 0 {
                return Err(format!("global_avg_pool wants [b,c,l], got {:?}", a.shape));
            }
            let l = a.shape[2];
            Tensor {
                shape: vec![a.shape[0], a.shape[1]],
                data: a.data.chunks(l).map(|c| c.iter().sum::<f64>() / l as f64).collect(),
            }
        }
        Op::Concat { axis } => {
            let first = x.first().ok_or("concat of nothing")?;
            if *axis >= first.ndim() {
                return Err(format!("axis {axis} out of range for {:?}", first.shape));
            }
            let mut total = 0;
            for t in x {
                let mut a = t.shape.clone();
                let mut b = first.shape.clone();
                a[*axis] = 0;
                b[*axis] = 0;
                if a != b {
                    return Err(format!("concat shapes {:?} and {:?} differ off-axis", first.shape, t.shape));
                }
                total += t.shape[*axis];
            }
            let (outer, _, inner) = split_axis(&first.shape, *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let chunk = t.shape[*axis] * inner;
                    data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape.clone();
            shape[*axis] = total;
            Tensor { shape, data }
        }
        Op::Slice { axis, start, len } => {
            let a = x[0];
            if *axis >= a.ndim() || start + len > a.shape[*axis] || *len == 0 {
                return Err(format!("slice {start}..{} of axis {axis} out of {:?}", start + len, a.shape));
            }
            let (outer, n, inner) = split_axis(&a.shape, *axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&a.data[base..base + len * inner]);
            }
            let mut shape = a.shape.clone();
            shape[*axis] = *len;
            Tensor { shape, data }
        }
        Op::Reshape { shape } => {
            if shape.iter().product::<usize>() != x[0].len() {
                return Err(format!("cannot reshape {:?} into {shape:?}", x[0].shape));
            }
            Tensor {
                shape: shape.clone(),
                data: x[0].data.clone(),
            }
        }
        Op::Permute { perm } => {
            let (shape, data) = permute_data(&x[0].data, &x[0].shape, perm)?;
            Tensor { shape, data }
        }
        Op::ScaleShift { scale, shift } => unary(x[0], |v| scale * v + shift),
        Op::Sum => Tensor::scalar(x[0].data.iter().sum()),
        Op::L1Norm => Tensor::scalar(x[0].data.iter().map(|v| v.abs()).sum()),
        Op::SqL2Norm => Tensor::scalar(x[0].data.iter().map(|v| v * v).sum()),
        Op::Heaviside => unary(x[0], |v| if v > 0.0 { 1.0 } else { 0.0 }),
    })
}

// ---------------------------------------------------------------------------
// reverse rules

fn reduce_to(g: &[f64], p: usize) -> Vec<f64> {
    if g.len() == p {
        return g.to_vec();
    }
    let mut out = vec![0.0; p];
    for (i, v) in g.iter().enumerate() {
        out[i % p] += v;
    }
    out
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn vjp(op: &Op, x: &[&Tensor], y: &Tensor, g: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
    let gd = &g.data;
    match op {
        Op::Leaf { .. } | Op::Heaviside => vec![None; x.len()],
        Op::Add | Op::Sub => {
            let p = x[1].len();
            let ga = need[0].then(|| like(x[0], gd.clone()));
            let gb = need[1].then(|| {
                let mut r = reduce_to(gd, p);
                if matches!(op, Op::Sub) {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                like(x[1], r)
            });
            vec![ga, gb]
        }
        Op::Mul => {
            let p = x[1].len();
            let ga = need[0].then(|| {
                like(
                    x[0],
                    gd.iter().enumerate().map(|(i, v)| v * x[1].data[i % p]).collect(),
                )
            });
            let gb = need[1].then(|| {
                let prod: Vec<f64> = gd.iter().zip(&x[0].data).map(|(v, a)| v * a).collect();
                like(x[1], reduce_to(&prod, p))
            });
            vec![ga, gb]
        }
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            match matmul_kind(a, b).expect("validated in forward") {
                MatMulKind::Flat { rows, k, m } => {
                    let ga = need[0].then(|| like(a, kernels::matmul_nt(gd, &b.data, rows, m, k)));
                    let gb = need[1].then(|| like(b, kernels::matmul_tn(&a.data, gd, k, rows, m)));
                    vec![ga, gb]
                }
                MatMulKind::Batched { b: nb, n, k, m } => {
                    let ga = need[0].then(|| {
                        let mut d = Vec::with_capacity(a.len());
                        for i in 0..nb {
                            d.extend(kernels::matmul_nt(
                                &gd[i * n * m..(i + 1) * n * m],
                                &b.data[i * k * m..(i + 1) * k * m],
                                n,
                                m,
                                k,
                            ));
                        }
                        like(a, d)
                    });
                    let gb = need[1].then(|| {
                        let mut d = Vec::with_capacity(b.len());
                        for i in 0..nb {
                            d.extend(kernels::matmul_tn(
                                &a.data[i * n * k..(i + 1) * n * k],
                                &gd[i * n * m..(i + 1) * n * m],
                                k,
                                n,
                                m,
                            ));
                        }
                        like(b, d)
                    });
                    vec![ga, gb]
                }
            }
        }
        Op::LeakyRelu { slope } => vec![Some(like(
            x[0],
            gd.iter()
                .zip(&x[0].data)
                .map(|(v, &a)| if a > 0.0 { *v } else { slope * v })
                .collect(),
        ))],
        Op::Tanh => vec![Some(like(
            x[0],
            gd.iter().zip(&y.data).map(|(v, t)| v * (1.0 - t * t)).collect(),
        ))],
        Op::Sin => vec![Some(like(
            x[0],
            gd.iter().zip(&x[0].data).map(|(v, a)| v * a.cos()).collect(),
        ))],
        Op::Cos => vec![Some(like(
            x[0],
            gd.iter().zip(&x[0].data).map(|(v, a)| -v * a.sin()).collect(),
        ))],
        Op::Softmax => {
            let n = *y.shape.last().unwrap();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data.chunks(n)).zip(gd.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(like(x[0], d))]
        }
        Op::LogSoftmax => {
            let n = *y.shape.last().unwrap();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data.chunks(n)).zip(gd.chunks(n)) {
                let total: f64 = gr.iter().sum();
                for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * total;
                }
            }
            vec![Some(like(x[0], d))]
        }
        Op::LayerNorm => {
            let n = *y.shape.last().unwrap();
            let nf = n as f64;
            let mut d = vec![0.0; y.len()];
            for (((dr, yr), gr), xr) in d
                .chunks_mut(n)
                .zip(y.data.chunks(n))
                .zip(gd.chunks(n))
                .zip(x[0].data.chunks(n))
            {
                let mean = xr.iter().sum::<f64>() / nf;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let g_mean = gr.iter().sum::<f64>() / nf;
                let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                for ((o, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = inv * (gv - g_mean - yv * gy_mean);
                }
            }
            vec![Some(like(x[0], d))]
        }
        Op::Conv1d { pad } => {
            let d = conv_dims(x[0], x[1], *pad).expect("validated in forward");
            let gx = need[0].then(|| like(x[0], kernels::conv1d_grad_input(gd, &x[1].data, &d)));
            let gw = need[1].then(|| like(x[1], kernels::conv1d_grad_weight(gd, &x[0].data, &d)));
            vec![gx, gw]
        }
        Op::GlobalAvgPool => {
            let l = x[0].shape[2];
            let mut d = Vec::with_capacity(x[0].len());
            for v in gd {
                d.extend(std::iter::repeat_n(v / l as f64, l));
            }
            vec![Some(like(x[0], d))]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(&y.shape, *axis);
            let mut offset = 0;
            x.iter()
                .enumerate()
                .map(|(i, t)| {
                    let n = t.shape[*axis];
                    let start = offset;
                    offset += n;
                    need[i].then(|| {
                        let mut d = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            d.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        like(t, d)
                    })
                })
                .collect()
        }
        Op::Slice { axis, start, len } => {
            let (outer, n, inner) = split_axis(&x[0].shape, *axis);
            let mut d = vec![0.0; x[0].len()];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(like(x[0], d))]
        }
        Op::Reshape { .. } => vec![Some(like(x[0], gd.clone()))],
        Op::Permute { perm } => {
            let mut inv = vec![0; perm.len()];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            let (_, d) = permute_data(gd, &y.shape, &inv).expect("inverse of a valid permutation");
            vec![Some(like(x[0], d))]
        }
        Op::ScaleShift { scale, .. } => vec![Some(like(x[0], gd.iter().map(|v| v * scale).collect()))],
        Op::Sum => vec![Some(Tensor::full(&x[0].shape, gd[0]))],
        Op::L1Norm => vec![Some(like(
            x[0],
            x[0].data
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        gd[0]
                    } else if v < 0.0 {
                        -gd[0]
                    } else {
                        0.0
                    }
                })
                .collect(),
        ))],
        Op::SqL2Norm => vec![Some(like(x[0], x[0].data.iter().map(|v| 2.0 * v * gd[0]).collect()))],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::zeros(&[3])).unwrap();
        let s = g.softmax(x).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::full(&[2, 5], 4.25)).unwrap();
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![-2.0, 3.0])).unwrap();
        let y = g.leaky_relu(x, 0.01).unwrap();
        assert_eq!(g.value(y).data(), &[-0.02, 3.0]);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.set_output("y", y);
        let grads = g.backward("y").unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn stop_edge_gives_exact_zero() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        let w = g.param("w", Tensor::vector(vec![0.3, 0.3, 0.3])).unwrap();
        let y = g.mul(x, w).unwrap();
        g.stop_edge(y, 0).unwrap();
        let s = g.sum(y).unwrap();
        g.set_output("s", s);
        let grads = g.backward("s").unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 0.0 && v.is_sign_positive()));
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let v = g.param("v", Tensor::vector(vec![0.2, -1.0, 3.0, 0.7])).unwrap();
        let s = g.softmax(v).unwrap();
        let total = g.sum(s).unwrap();
        g.set_output("total", total);
        let grads = g.backward("total").unwrap();
        assert!(grads.get("v").unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input("b", Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { node, op, detail }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::zeros(&[2])).unwrap();
        let b = g.tanh(a).unwrap();
        g.set_output("b", b);
        assert!(g.backward("b").is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let (s, d) = permute_data(&x.data, &x.shape, &[2, 0, 1]).unwrap();
        assert_eq!(s, vec![4, 2, 3]);
        // element [i,j,k] lands at [k,i,j]
        assert_eq!(d[(3 * 2 + 1) * 3 + 2], x.data[(1 * 3 + 2) * 4 + 3]);
        let (s2, back) = permute_data(&d, &s, &[1, 2, 0]).unwrap();
        assert_eq!(s2, x.shape);
        assert_eq!(back, x.data);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut g = Graph::new();
        let a = g.input("a", t(&[2, 3], &[0.1, -0.4, 2.0, 1.5, 0.0, -3.0])).unwrap();
        let w = g.param("w", t(&[3, 2], &[0.5, -1.0, 0.25, 0.75, -0.3, 0.2])).unwrap();
        let h = g.matmul(a, w).unwrap();
        let s = g.softmax(h).unwrap();
        let n = g.layer_norm(s).unwrap();
        let o = g.sq_l2_norm(n).unwrap();
        g.set_output("o", o);
        let first = g.output("o").unwrap().clone();
        let again = g.forward(&BTreeMap::new()).unwrap();
        assert_eq!(first.data()[0].to_bits(), again["o"].data()[0].to_bits());
    }
}
