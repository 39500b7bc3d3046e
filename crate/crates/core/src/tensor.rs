//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is a define-by-run tape: a [`Graph`] is rebuilt for every
//! forward pass, each operation appends a value node plus an op record, and
//! [`Graph::backward`] walks the records once in reverse. Values are flat
//! row-major `Vec<f64>` with an explicit shape; there are no views or strides,
//! copies are fine at this scale. All reductions run left to right so repeated
//! runs are bitwise identical.

use crate::error::{Error, Result};
use crate::rng::ChaCha8Rng;
use rand::Rng;

/// Handle to a value node inside one [`Graph`]. Ids are not meaningful across
/// graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// A dense value node. `shape` multiplies out to `data.len()`; `grad`, when
/// populated by backward, has the same length as `data`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub node_id: NodeId,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }
}

/// Elementwise binary op kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// gelu via the tanh approximation:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
/// The gradient oracle in the tests differentiates this exact formula.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug)]
enum Op {
    MatMul,
    /// Batched matmul over equal leading dims: `[*, m, k] x [*, k, n]`.
    Bmm,
    Elementwise {
        kind: ElemKind,
    },
    Scale {
        factor: f64,
    },
    Activation {
        kind: Activation,
    },
    Softmax {
        axis: usize,
    },
    LayerNorm {
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        targets: Vec<i64>,
        ignore_index: i64,
        probs: Vec<f64>,
        counted: usize,
    },
    /// Row gather from a `[vocab, dim]` table; `ids` are saved activations.
    Embedding {
        ids: Vec<usize>,
    },
    /// Inverted dropout; mask entries are 0 or 1/(1-rate).
    Dropout {
        mask: Vec<f64>,
    },
    SumAll,
    Reshape,
    TransposeLast2,
    /// `[a, b, c, d] -> [a, c, b, d]`; used to split/merge attention heads.
    SwapAxes12,
    /// Select one index along axis 1, e.g. the first token of `[batch, seq, d]`.
    SelectAxis1 {
        index: usize,
    },
}

struct OpRecord {
    op: Op,
    inputs: Vec<NodeId>,
    output: NodeId,
}

/// Define-by-run computation graph. Nodes are appended in topological order;
/// every input id precedes its consumer by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    records: Vec<OpRecord>,
    backward_done: bool,
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Insert a leaf value node.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "leaf shape {} implies {} elements, data has {}",
                shape_str(shape),
                numel,
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![], vec![v], false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
            node_id: id,
        });
        id
    }

    fn record(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let out = self.push(shape, data, requires_grad);
        self.records.push(OpRecord {
            op,
            inputs,
            output: out,
        });
        out
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Standard matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul expects [m,k] x [k,n], got {} x {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(self.data(a), self.data(b), m, k, n);
        Ok(self.record(Op::MatMul, vec![a, b], vec![m, n], out))
    }

    /// Batched matmul `[*, m, k] x [*, k, n] -> [*, m, n]` with equal leading
    /// dims on both sides.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Dimension(format!(
                "bmm expects equal leading dims, got {} x {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::Dimension(format!(
                "bmm inner dims disagree: {} x {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let c = mm(
                &self.data(a)[bi * m * k..(bi + 1) * m * k],
                &self.data(b)[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
            out[bi * m * n..(bi + 1) * m * n].copy_from_slice(&c);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.record(Op::Bmm, vec![a, b], shape, out))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    /// Pointwise add/sub/mul. `b` may be broadcast over `a`: its shape,
    /// right-aligned against `a`'s, must match dim for dim or be 1. Gradients
    /// for `b` sum over the broadcast axes.
    pub fn elementwise(&mut self, a: NodeId, b: NodeId, kind: ElemKind) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let map = broadcast_map(&sa, &sb).ok_or_else(|| {
            Error::Dimension(format!(
                "shape {} is not broadcastable over {}",
                shape_str(&sb),
                shape_str(&sa)
            ))
        })?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; da.len()];
        match kind {
            ElemKind::Add => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = da[i] + db[map.index(i)];
                }
            }
            ElemKind::Sub => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = da[i] - db[map.index(i)];
                }
            }
            ElemKind::Mul => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = da[i] * db[map.index(i)];
                }
            }
        }
        Ok(self.record(Op::Elementwise { kind }, vec![a, b], sa, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Mul)
    }

    /// Multiply by a compile-time constant (no grad flows into the factor).
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|v| v * factor).collect();
        self.record(Op::Scale { factor }, vec![x], shape, out)
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let shape = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Gelu => gelu(v),
                Activation::Tanh => v.tanh(),
            })
            .collect();
        self.record(Op::Activation { kind }, vec![x], shape, out)
    }

    /// Softmax along `axis`, computed with max subtraction. Slices along the
    /// axis sum to 1 within 1e-12 for any finite input.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} invalid for shape {}",
                shape_str(&shape)
            )));
        }
        let out = softmax_slices(self.data(x), &shape, axis);
        Ok(self.record(Op::Softmax { axis }, vec![x], shape, out))
    }

    /// Layer normalization over the last dimension followed by a learned
    /// affine: `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::Dimension("layer_norm requires at least one dimension".into())
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gain {} / bias {} must both be [{d}] for input {}",
                shape_str(self.shape(gain)),
                shape_str(self.shape(bias)),
                shape_str(&shape)
            )));
        }
        let rows = self.data(x).len() / d;
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![0.0; xd.len()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for j in 0..d {
                out[r * d + j] = gd[j] * (row[j] - mean) * inv_std + bd[j];
            }
        }
        Ok(self.record(
            Op::LayerNorm {
                mean: means,
                inv_std: inv_stds,
            },
            vec![x, gain, bias],
            shape,
            out,
        ))
    }

    // ── Losses and reductions ───────────────────────────────────────────

    /// Mean negative log-likelihood of `targets` under softmax of `logits`
    /// (`[n, classes]`). Positions whose target equals `ignore_index` do not
    /// contribute; if every position is ignored the loss is 0 with zero
    /// gradient.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects [n, classes] logits, got {}",
                shape_str(&shape)
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy got {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        let xd = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        let mut counted = 0usize;
        for i in 0..n {
            let t = targets[i];
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(Error::Data(format!(
                    "class index {t} out of range for {c} classes at row {i}"
                )));
            }
            let lse = max + sum.ln();
            total += lse - row[t as usize];
            counted += 1;
        }
        let loss = if counted == 0 {
            0.0
        } else {
            total / counted as f64
        };
        Ok(self.record(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                ignore_index,
                probs,
                counted,
            },
            vec![logits],
            vec![],
            vec![loss],
        ))
    }

    /// Sum of every element, yielding a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.data(x).iter().sum();
        self.record(Op::SumAll, vec![x], vec![], vec![total])
    }

    /// Mean of every element, yielding a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.data(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ── Lookup, shape, and regularization ───────────────────────────────

    /// Gather rows of `table` (`[vocab, dim]`) by token id. Output shape is
    /// `ids_shape + [dim]`. Backward scatter-adds into the table gradient.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], ids_shape: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Dimension(format!(
                "embedding table must be [vocab, dim], got {}",
                shape_str(&ts)
            )));
        }
        let numel: usize = ids_shape.iter().product();
        if numel != ids.len() {
            return Err(Error::Dimension(format!(
                "ids shape {} implies {} ids, got {}",
                shape_str(ids_shape),
                numel,
                ids.len()
            )));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        let td = self.data(table);
        let mut out = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Data(format!(
                    "token id {id} out of range for vocab size {vocab}"
                )));
            }
            out[i * dim..(i + 1) * dim].copy_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        Ok(self.record(Op::Embedding { ids: ids.to_vec() }, vec![table], shape, out))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales by `1/(1-rate)`. The mask is drawn once here and saved, so
    /// backward sees the same mask as forward.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.record(Op::Dropout { mask }, vec![x], shape, out))
    }

    /// Reinterpret the data with a new shape of identical element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} ({} elements) to {}",
                shape_str(self.shape(x)),
                self.data(x).len(),
                shape_str(shape)
            )));
        }
        let data = self.data(x).to_vec();
        Ok(self.record(Op::Reshape, vec![x], shape.to_vec(), data))
    }

    /// Transpose the last two dimensions.
    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!(
                "transpose_last2 needs >= 2 dims, got {}",
                shape_str(&shape)
            )));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let out = transpose_batched(self.data(x), batch, m, n);
        let mut new_shape = shape.clone();
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        Ok(self.record(Op::TransposeLast2, vec![x], new_shape, out))
    }

    /// Swap axes 1 and 2 of a 4-d tensor: `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes_1_2(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "swap_axes_1_2 needs a 4-d tensor, got {}",
                shape_str(&shape)
            )));
        }
        let out = swap_12(self.data(x), &shape);
        let new_shape = vec![shape[0], shape[2], shape[1], shape[3]];
        Ok(self.record(Op::SwapAxes12, vec![x], new_shape, out))
    }

    /// Select a single index along axis 1, dropping that axis:
    /// `[d0, d1, rest...] -> [d0, rest...]`.
    pub fn select_axis1(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index >= shape[1] {
            return Err(Error::Dimension(format!(
                "select_axis1 index {index} invalid for shape {}",
                shape_str(&shape)
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let (d0, d1) = (shape[0], shape[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; d0 * inner];
        for i in 0..d0 {
            let src = (i * d1 + index) * inner;
            out[i * inner..(i + 1) * inner].copy_from_slice(&xd[src..src + inner]);
        }
        let mut new_shape = vec![d0];
        new_shape.extend_from_slice(&shape[2..]);
        Ok(self.record(Op::SelectAxis1 { index }, vec![x], new_shape, out))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss. Each op record is
    /// visited exactly once, in reverse creation order. Calling twice on the
    /// same graph is an error; rebuild the graph instead.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; rebuild the graph before differentiating again"
                    .into(),
            ));
        }
        let lt = &self.nodes[loss.0];
        if !lt.is_scalar() {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {}",
                shape_str(&lt.shape)
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let out_grad = match &self.nodes[rec.output.0].grad {
                Some(g) => g.clone(),
                None => continue, // not on a path from the loss
            };
            self.backward_record(rec, &out_grad);
        }
        self.records = records;
        Ok(())
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn backward_record(&mut self, rec: &OpRecord, g: &[f64]) {
        match &rec.op {
            Op::MatMul => {
                let (a, b) = (rec.inputs[0], rec.inputs[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs_grad(a) {
                    let ga = mm_nt(g, self.data(b), m, n, k);
                    self.accumulate(a, &ga);
                }
                if self.needs_grad(b) {
                    let gb = mm_tn(self.data(a), g, m, k, n);
                    self.accumulate(b, &gb);
                }
            }
            Op::Bmm => {
                let (a, b) = (rec.inputs[0], rec.inputs[1]);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.needs_grad(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &self.data(b)[bi * k * n..(bi + 1) * k * n];
                        ga[bi * m * k..(bi + 1) * m * k].copy_from_slice(&mm_nt(gs, bs, m, n, k));
                    }
                    self.accumulate(a, &ga);
                }
                if self.needs_grad(b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &self.data(a)[bi * m * k..(bi + 1) * m * k];
                        gb[bi * k * n..(bi + 1) * k * n].copy_from_slice(&mm_tn(as_, gs, m, k, n));
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::Elementwise { kind } => {
                let (a, b) = (rec.inputs[0], rec.inputs[1]);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let map = broadcast_map(&sa, &sb).expect("validated in forward");
                match kind {
                    ElemKind::Add | ElemKind::Sub => {
                        let sign = if *kind == ElemKind::Sub { -1.0 } else { 1.0 };
                        if self.needs_grad(a) {
                            self.accumulate(a, g);
                        }
                        if self.needs_grad(b) {
                            let mut gb = vec![0.0; self.data(b).len()];
                            for (i, gi) in g.iter().enumerate() {
                                gb[map.index(i)] += sign * gi;
                            }
                            self.accumulate(b, &gb);
                        }
                    }
                    ElemKind::Mul => {
                        if self.needs_grad(a) {
                            let bd = self.data(b);
                            let ga: Vec<f64> = g
                                .iter()
                                .enumerate()
                                .map(|(i, gi)| gi * bd[map.index(i)])
                                .collect();
                            self.accumulate(a, &ga);
                        }
                        if self.needs_grad(b) {
                            let ad = self.data(a);
                            let mut gb = vec![0.0; self.data(b).len()];
                            for (i, gi) in g.iter().enumerate() {
                                gb[map.index(i)] += gi * ad[i];
                            }
                            self.accumulate(b, &gb);
                        }
                    }
                }
            }
            Op::Scale { factor } => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    let gx: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
                    self.accumulate(x, &gx);
                }
            }
            Op::Activation { kind } => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    let xd = self.data(x);
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xd)
                        .map(|(gi, &v)| {
                            gi * match kind {
                                Activation::Relu => {
                                    if v > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Activation::Gelu => gelu_grad(v),
                                Activation::Tanh => {
                                    let t = v.tanh();
                                    1.0 - t * t
                                }
                            }
                        })
                        .collect();
                    self.accumulate(x, &gx);
                }
            }
            Op::Softmax { axis } => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    let shape = self.shape(rec.output).to_vec();
                    let y = self.data(rec.output).to_vec();
                    let gx = softmax_backward(&y, g, &shape, *axis);
                    self.accumulate(x, &gx);
                }
            }
            Op::LayerNorm { mean, inv_std } => {
                let (x, gain, bias) = (rec.inputs[0], rec.inputs[1], rec.inputs[2]);
                let d = *self.shape(x).last().unwrap();
                let rows = self.data(x).len() / d;
                let xd = self.data(x).to_vec();
                let gd = self.data(gain).to_vec();
                if self.needs_grad(gain) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            gg[j] += g[r * d + j] * xhat;
                        }
                    }
                    self.accumulate(gain, &gg);
                }
                if self.needs_grad(bias) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    self.accumulate(bias, &gb);
                }
                if self.needs_grad(x) {
                    let mut gx = vec![0.0; xd.len()];
                    for r in 0..rows {
                        // gi = dL/dxhat; dx = inv_std * (gi - mean(gi) - xhat * mean(gi*xhat))
                        let mut sum_gi = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..d {
                            let gi = g[r * d + j] * gd[j];
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            sum_gi += gi;
                            sum_gx += gi * xhat;
                        }
                        let m_gi = sum_gi / d as f64;
                        let m_gx = sum_gx / d as f64;
                        for j in 0..d {
                            let gi = g[r * d + j] * gd[j];
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            gx[r * d + j] = inv_std[r] * (gi - m_gi - xhat * m_gx);
                        }
                    }
                    self.accumulate(x, &gx);
                }
            }
            Op::CrossEntropy {
                targets,
                ignore_index,
                probs,
                counted,
            } => {
                let logits = rec.inputs[0];
                if self.needs_grad(logits) && *counted > 0 {
                    let c = self.shape(logits)[1];
                    let scale = g[0] / *counted as f64;
                    let mut gl = vec![0.0; probs.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j as i64 == t { 1.0 } else { 0.0 };
                            gl[i * c + j] = scale * (probs[i * c + j] - onehot);
                        }
                    }
                    self.accumulate(logits, &gl);
                }
            }
            Op::Embedding { ids } => {
                let table = rec.inputs[0];
                if self.needs_grad(table) {
                    let dim = self.shape(table)[1];
                    let mut gt = vec![0.0; self.data(table).len()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            gt[id * dim + j] += g[i * dim + j];
                        }
                    }
                    self.accumulate(table, &gt);
                }
            }
            Op::Dropout { mask } => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    let gx: Vec<f64> = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
                    self.accumulate(x, &gx);
                }
            }
            Op::SumAll => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    let gx = vec![g[0]; self.data(x).len()];
                    self.accumulate(x, &gx);
                }
            }
            Op::Reshape => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    self.accumulate(x, g);
                }
            }
            Op::TransposeLast2 => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    let out_shape = self.shape(rec.output).to_vec();
                    let (m, n) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                    let batch: usize = out_shape[..out_shape.len() - 2].iter().product();
                    let gx = transpose_batched(g, batch, m, n);
                    self.accumulate(x, &gx);
                }
            }
            Op::SwapAxes12 => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    let out_shape = self.shape(rec.output).to_vec();
                    let gx = swap_12(g, &out_shape);
                    self.accumulate(x, &gx);
                }
            }
            Op::SelectAxis1 { index } => {
                let x = rec.inputs[0];
                if self.needs_grad(x) {
                    let shape = self.shape(x).to_vec();
                    let inner: usize = shape[2..].iter().product();
                    let (d0, d1) = (shape[0], shape[1]);
                    let mut gx = vec![0.0; d0 * d1 * inner];
                    for i in 0..d0 {
                        let dst = (i * d1 + index) * inner;
                        gx[dst..dst + inner].copy_from_slice(&g[i * inner..(i + 1) * inner]);
                    }
                    self.accumulate(x, &gx);
                }
            }
        }
    }
}

/// The ignore marker used by the losses in this crate.
pub const IGNORE_INDEX: i64 = -1;

// ── Raw kernels ─────────────────────────────────────────────────────────

/// `c[m,n] = a[m,k] * b[k,n]`, accumulated over `p` left to right.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// `c[m,k] = a[m,n] * b[k,n]^T` (second operand transposed).
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T * b[m,n]` (first operand transposed).
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn transpose_batched(x: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn swap_12(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (a, b, c, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn softmax_slices(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    out
}

fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = 0.0;
            for a in 0..axis_len {
                dot += g[base + a * inner] * y[base + a * inner];
            }
            for a in 0..axis_len {
                let idx = base + a * inner;
                gx[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    gx
}

// ── Broadcasting ────────────────────────────────────────────────────────

/// Maps flat indices of the full shape `a` onto flat indices of `b`, where
/// `b`'s shape right-aligns against `a`'s with each dim equal or 1.
struct BroadcastMap {
    /// (a_stride, b_stride, a_dim) per axis of `a`, outermost first.
    dims: Vec<(usize, usize, usize)>,
    identical: bool,
}

impl BroadcastMap {
    #[inline]
    fn index(&self, mut flat: usize) -> usize {
        if self.identical {
            return flat;
        }
        let mut out = 0;
        for &(a_stride, b_stride, a_dim) in &self.dims {
            let coord = flat / a_stride;
            flat -= coord * a_stride;
            if b_stride != usize::MAX {
                // axis present in b and not broadcast
                out += coord * b_stride;
            }
            debug_assert!(coord < a_dim);
        }
        out
    }
}

fn broadcast_map(a: &[usize], b: &[usize]) -> Option<BroadcastMap> {
    if b.len() > a.len() {
        return None;
    }
    if a == b {
        return Some(BroadcastMap {
            dims: vec![],
            identical: true,
        });
    }
    let offset = a.len() - b.len();
    // b's dims, left-padded with 1s
    let b_dim = |i: usize| if i < offset { 1 } else { b[i - offset] };
    for (i, &ad) in a.iter().enumerate() {
        let bd = b_dim(i);
        if bd != ad && bd != 1 {
            return None;
        }
    }
    let mut a_strides = vec![1usize; a.len()];
    for i in (0..a.len().saturating_sub(1)).rev() {
        a_strides[i] = a_strides[i + 1] * a[i + 1];
    }
    let mut b_strides_full = vec![0usize; a.len()];
    let mut acc = 1usize;
    for i in (0..a.len()).rev() {
        let bd = b_dim(i);
        b_strides_full[i] = if bd == 1 { usize::MAX } else { acc };
        if bd != 1 {
            acc *= bd;
        }
    }
    let dims = (0..a.len())
        .map(|i| (a_strides[i], b_strides_full[i], a[i]))
        .collect();
    Some(BroadcastMap {
        dims,
        identical: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    /// Central finite difference of a scalar-valued function at coordinate
    /// `i`, the independent gradient oracle used throughout these tests.
    fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    /// Spec tolerance: relative error < 1e-4 when |analytic| > 1e-8,
    /// absolute error < 1e-8 otherwise.
    fn grad_close(analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        (analytic.abs() > 1e-8 && diff / analytic.abs() < 1e-4) || diff < 1e-8
    }

    fn check_all_coords(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        for i in 0..x.len() {
            let num = central_diff(f, x, i, 1e-5);
            assert!(
                grad_close(analytic[i], num),
                "coord {i}: analytic {} vs finite-diff {}",
                analytic[i],
                num
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        // [[1,2]] . [[3],[4]] = [[11]]
        let mut g = Graph::new();
        let a = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_finite_difference() {
        // d sum(a.b) / da at a=[[1,2]], b=[[3],[4]] should be [[3,4]]
        let a0 = [1.0, 2.0];
        let f = |a: &[f64]| -> f64 {
            let mut g = Graph::new();
            let an = g.constant(&[1, 2], a.to_vec()).unwrap();
            let bn = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
            let c = g.matmul(an, bn).unwrap();
            { let s = g.sum_all(c); g.data(s)[0] }
        };
        let mut g = Graph::new();
        let an = g.leaf(&[1, 2], a0.to_vec(), true).unwrap();
        let bn = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = g.matmul(an, bn).unwrap();
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        let grad = g.grad(an).unwrap().to_vec();
        assert_eq!(grad, vec![3.0, 4.0]);
        check_all_coords(&f, &a0, &grad);
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let mut g = Graph::new();
        let a = g
            .constant(&[2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        let b = g
            .constant(&[2, 3, 2], (0..12).map(|i| (i as f64) - 4.0).collect())
            .unwrap();
        let c = g.bmm(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2]);
        for bi in 0..2 {
            let av = &g.data(a)[bi * 6..(bi + 1) * 6];
            let bv = &g.data(b)[bi * 6..(bi + 1) * 6];
            let expect = mm(av, bv, 2, 3, 2);
            assert_eq!(&g.data(c)[bi * 4..(bi + 1) * 4], &expect[..]);
        }
    }

    #[test]
    fn elementwise_add_identity_and_mul() {
        let mut g = Graph::new();
        let a = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let z = g.constant(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = g.add(a, z).unwrap();
        assert_eq!(g.data(s), &[1.0, 2.0, 3.0]);

        let x = g.constant(&[2], vec![2.0, 3.0]).unwrap();
        let y = g.constant(&[2], vec![4.0, 5.0]).unwrap();
        let m = g.mul(x, y).unwrap();
        assert_eq!(g.data(m), &[8.0, 15.0]);
    }

    #[test]
    fn broadcast_bias_grad_is_column_sums() {
        // [2,2] + [2]-shaped bias; d sum(out*w) / d bias = column sums of w
        let bias0 = [0.1, -0.2];
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [0.5, -1.0, 2.0, 1.5];
        let f = |b: &[f64]| -> f64 {
            let mut g = Graph::new();
            let xn = g.constant(&[2, 2], x.to_vec()).unwrap();
            let bn = g.constant(&[2], b.to_vec()).unwrap();
            let wn = g.constant(&[2, 2], w.to_vec()).unwrap();
            let s = g.add(xn, bn).unwrap();
            let p = g.mul(s, wn).unwrap();
            { let s = g.sum_all(p); g.data(s)[0] }
        };
        let mut g = Graph::new();
        let xn = g.constant(&[2, 2], x.to_vec()).unwrap();
        let bn = g.leaf(&[2], bias0.to_vec(), true).unwrap();
        let wn = g.constant(&[2, 2], w.to_vec()).unwrap();
        let s = g.add(xn, bn).unwrap();
        let p = g.mul(s, wn).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        let grad = g.grad(bn).unwrap().to_vec();
        // column sums of w
        assert_eq!(grad, vec![0.5 + 2.0, -1.0 + 1.5]);
        check_all_coords(&f, &bias0, &grad);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2], vec![0.0; 2]).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_and_gelu_points() {
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = g.activation(x, Activation::Relu);
        assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn gelu_grad_matches_finite_difference_at_one() {
        let f = |x: &[f64]| -> f64 {
            let mut g = Graph::new();
            let xn = g.constant(&[1], x.to_vec()).unwrap();
            let y = g.activation(xn, Activation::Gelu);
            g.data(y)[0]
        };
        let num = central_diff(&f, &[1.0], 0, 1e-5);
        assert!((gelu_grad(1.0) - num).abs() < 1e-6);
    }

    #[test]
    fn softmax_symmetry_stability_normalization() {
        let mut g = Graph::new();
        let a = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);

        let big = g.constant(&[2], vec![1000.0, 1000.0]).unwrap();
        let sb = g.softmax(big, 0).unwrap();
        assert_eq!(g.data(sb), &[0.5, 0.5]);
        assert!(g.data(sb).iter().all(|v| v.is_finite()));

        let t = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let st = g.softmax(t, 0).unwrap();
        let sum: f64 = g.data(st).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(g.softmax(a, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_inner_axis_grad() {
        let x0 = [0.3, -0.7, 1.2, 0.4, 0.0, -0.1];
        let w = [1.0, -2.0, 0.5, 0.7, -0.3, 1.1];
        let f = |x: &[f64]| -> f64 {
            let mut g = Graph::new();
            let xn = g.constant(&[2, 3], x.to_vec()).unwrap();
            let s = g.softmax(xn, 1).unwrap();
            let wn = g.constant(&[2, 3], w.to_vec()).unwrap();
            let p = g.mul(s, wn).unwrap();
            { let s = g.sum_all(p); g.data(s)[0] }
        };
        let mut g = Graph::new();
        let xn = g.leaf(&[2, 3], x0.to_vec(), true).unwrap();
        let s = g.softmax(xn, 1).unwrap();
        let wn = g.constant(&[2, 3], w.to_vec()).unwrap();
        let p = g.mul(s, wn).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        check_all_coords(&f, &x0, g.grad(xn).unwrap());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 4], vec![5.0; 4]).unwrap();
        let gain = g.constant(&[4], vec![1.0; 4]).unwrap();
        let bias = g.constant(&[4], vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in g.data(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_output_mean_near_zero() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let gain = g.constant(&[3], vec![1.0; 3]).unwrap();
        let bias = g.constant(&[3], vec![0.0; 3]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let mean: f64 = g.data(y).iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn layer_norm_grad_matches_finite_difference() {
        let x0 = [0.5, -1.3, 2.2, 0.1, 0.9, -0.4];
        let gain0 = [1.1, 0.9, 1.3];
        let w = [0.2, -0.5, 1.0, 0.7, -1.1, 0.4];
        let loss_of = |x: &[f64], gain: &[f64], bias: &[f64]| -> (Graph, NodeId, NodeId, NodeId, NodeId) {
            let mut g = Graph::new();
            let xn = g.leaf(&[2, 3], x.to_vec(), true).unwrap();
            let gn = g.leaf(&[3], gain.to_vec(), true).unwrap();
            let bn = g.leaf(&[3], bias.to_vec(), true).unwrap();
            let y = g.layer_norm(xn, gn, bn, 1e-5).unwrap();
            let wn = g.constant(&[2, 3], w.to_vec()).unwrap();
            let p = g.mul(y, wn).unwrap();
            let l = g.sum_all(p);
            (g, l, xn, gn, bn)
        };
        let (mut g, l, xn, gn, bn) = loss_of(&x0, &gain0, &[0.0; 3]);
        g.backward(l).unwrap();
        let (gx, gg, gb) = (
            g.grad(xn).unwrap().to_vec(),
            g.grad(gn).unwrap().to_vec(),
            g.grad(bn).unwrap().to_vec(),
        );
        let fx = |x: &[f64]| {
            let (g, l, ..) = loss_of(x, &gain0, &[0.0; 3]);
            g.data(l)[0]
        };
        let fg = |gain: &[f64]| {
            let (g, l, ..) = loss_of(&x0, gain, &[0.0; 3]);
            g.data(l)[0]
        };
        let fb = |bias: &[f64]| {
            let (g, l, ..) = loss_of(&x0, &gain0, bias);
            g.data(l)[0]
        };
        check_all_coords(&fx, &x0, &gx);
        check_all_coords(&fg, &gain0, &gg);
        check_all_coords(&fb, &[0.0; 3], &gb);
    }

    #[test]
    fn cross_entropy_confident_and_uniform() {
        let mut g = Graph::new();
        // one-hot confident correct logits -> loss ~ 0
        let logits = g
            .constant(&[2, 3], vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0])
            .unwrap();
        let l = g.cross_entropy(logits, &[0, 1], IGNORE_INDEX).unwrap();
        assert!(g.data(l)[0] < 1e-9);

        // uniform logits over c classes -> ln(c)
        let mut g = Graph::new();
        let logits = g.constant(&[1, 5], vec![0.7; 5]).unwrap();
        let l = g.cross_entropy(logits, &[3], IGNORE_INDEX).unwrap();
        assert!((g.data(l)[0] - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_masked_half() {
        // 4 positions, 2 ignored; expected = mean over the two live rows,
        // each term computed here with an independent log-sum-exp.
        let logits = vec![1.0, 2.0, 0.5, 0.0, 3.0, -1.0, 2.0, 2.0, 0.1, -0.5, 0.2, 0.9];
        let targets = [1, IGNORE_INDEX, 0, IGNORE_INDEX];
        let nll = |row: &[f64], t: usize| -> f64 {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let expected = (nll(&logits[0..3], 1) + nll(&logits[6..9], 0)) / 2.0;
        let mut g = Graph::new();
        let ln = g.constant(&[4, 3], logits.clone()).unwrap();
        let l = g.cross_entropy(ln, &targets, IGNORE_INDEX).unwrap();
        assert!((g.data(l)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let logits = g.leaf(&[2, 3], vec![0.3; 6], true).unwrap();
        let l = g
            .cross_entropy(logits, &[IGNORE_INDEX, IGNORE_INDEX], IGNORE_INDEX)
            .unwrap();
        assert_eq!(g.data(l)[0], 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(logits).is_none() || g.grad(logits).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_class() {
        let mut g = Graph::new();
        let logits = g.constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            g.cross_entropy(logits, &[3], IGNORE_INDEX),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let w = g.leaf(&[4], vec![0.3, -1.0, 2.0, 0.7], true).unwrap();
        let loss = g.sum_all(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut g = Graph::new();
        let w = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));

        let mut g = Graph::new();
        let w = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let loss = g.sum_all(w);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_leaves_receive_no_grad() {
        let mut g = Graph::new();
        let a = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let b = g.leaf(&[2], vec![3.0, 4.0], false).unwrap();
        let p = g.mul(a, b).unwrap();
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn composite_matmul_gelu_cross_entropy_grad() {
        // x[2,3] @ w[3,4] -> gelu -> cross_entropy; check dL/dw and dL/dx.
        let x0 = [0.2, -0.4, 0.9, 1.1, 0.3, -0.8];
        let w0 = [
            0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, -0.8, -0.9, 1.0, 0.11, 0.12,
        ];
        let targets = [2, 0];
        let build = |x: &[f64], w: &[f64]| -> (Graph, NodeId, NodeId, NodeId) {
            let mut g = Graph::new();
            let xn = g.leaf(&[2, 3], x.to_vec(), true).unwrap();
            let wn = g.leaf(&[3, 4], w.to_vec(), true).unwrap();
            let h = g.matmul(xn, wn).unwrap();
            let a = g.activation(h, Activation::Gelu);
            let l = g.cross_entropy(a, &targets, IGNORE_INDEX).unwrap();
            (g, l, xn, wn)
        };
        let (mut g, l, xn, wn) = build(&x0, &w0);
        g.backward(l).unwrap();
        let gx = g.grad(xn).unwrap().to_vec();
        let gw = g.grad(wn).unwrap().to_vec();
        let fx = |x: &[f64]| {
            let (g, l, ..) = build(x, &w0);
            g.data(l)[0]
        };
        let fw = |w: &[f64]| {
            let (g, l, ..) = build(&x0, w);
            g.data(l)[0]
        };
        check_all_coords(&fx, &x0, &gx);
        check_all_coords(&fw, &w0, &gw);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut g = Graph::new();
        let table = g
            .leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true)
            .unwrap();
        let e = g.embedding(table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(g.shape(e), &[3, 2]);
        assert_eq!(g.data(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum_all(e);
        g.backward(loss).unwrap();
        // row 2 hit twice, row 0 once, row 1 never
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(
            g.embedding(table, &[3], &[1]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dropout_scales_and_backprops_same_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.leaf(&[100], vec![1.0; 100], true).unwrap();
        let d = g.dropout(x, 0.4, &mut rng).unwrap();
        let out = g.data(d).to_vec();
        for v in &out {
            assert!(*v == 0.0 || (*v - 1.0 / 0.6).abs() < 1e-12);
        }
        let loss = g.sum_all(d);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for (o, gr) in out.iter().zip(grad) {
            assert_eq!(o, gr); // grad of sum is exactly the mask
        }
    }

    #[test]
    fn transpose_and_swap_roundtrip() {
        let mut g = Graph::new();
        let x = g
            .constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let t = g.transpose_last2(x).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.data(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        let y = g
            .constant(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let s = g.swap_axes_1_2(y).unwrap();
        let s2 = g.swap_axes_1_2(s).unwrap();
        assert_eq!(g.data(s2), g.data(y));
    }

    #[test]
    fn select_axis1_takes_slice_and_routes_grad() {
        let mut g = Graph::new();
        let x = g
            .leaf(&[2, 3, 2], (0..12).map(|i| i as f64).collect(), true)
            .unwrap();
        let s = g.select_axis1(x, 1).unwrap();
        assert_eq!(g.shape(s), &[2, 2]);
        assert_eq!(g.data(s), &[2.0, 3.0, 8.0, 9.0]);
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        let expect = [
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0,
        ];
        assert_eq!(grad, &expect);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || -> Vec<f64> {
            let mut g = Graph::new();
            let a = g
                .constant(&[4, 4], (0..16).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let b = g
                .constant(&[4, 4], (0..16).map(|i| (i as f64).cos()).collect())
                .unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax(c, 1).unwrap();
            g.data(s).to_vec()
        };
        let x = run();
        let y = run();
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
