//! Dynamic reverse-mode tape.
//!
//! Every forward operation appends a node holding its value and the inputs it
//! read; node ids are assigned in creation order, so the node list is already
//! topologically sorted and `backward` is a single reverse sweep.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{dot, gemm, norm, softmax_in_place, Tensor, COSINE_EPS, SIGMOID_CLAMP};
use crate::error::{dim_err, Result, SamlError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Index of a parameter in a [`ParamStore`](crate::numerics::ParamStore).
pub type ParamId = usize;

/// Clamp range applied to probabilities inside [`Tape::log_loss`].
pub const LOG_CLAMP: f64 = 1e-7;
/// Score assigned to padded key positions before the attention softmax.
pub const MASK_SCORE: f64 = -1e9;
/// Below this absolute row sum [`Tape::ratio_normalize`] falls back to uniform ratios.
pub const RATIO_GUARD: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Lookup {
        param: ParamId,
        rows: Vec<usize>,
    },
    StopGradient,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    RowCosine(Var, Var),
    RatioNormalize(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    LogLoss {
        p: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
    Attention(Box<AttentionSaved>),
    MaskedMeanPool {
        x: Var,
        mask: Rc<Vec<bool>>,
        batch: usize,
        len: usize,
    },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    mask: Rc<Vec<bool>>,
    batch: usize,
    len: usize,
    heads: usize,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum StopMode {
    Off,
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    stops: StopMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stops: StopMode::Off,
        }
    }

    /// A tape that remembers every `stop_gradient` output, in order.
    ///
    /// Paired with [`Tape::replaying_stops`] this lets finite differences
    /// hold stop-gradient values fixed, which is the function whose
    /// derivative `backward` actually computes.
    pub fn recording_stops() -> Self {
        Self {
            nodes: Vec::new(),
            stops: StopMode::Record(Vec::new()),
        }
    }

    pub fn replaying_stops(values: Vec<Tensor>) -> Self {
        Self {
            nodes: Vec::new(),
            stops: StopMode::Replay(values, 0),
        }
    }

    pub fn take_stop_values(&mut self) -> Vec<Tensor> {
        match std::mem::replace(&mut self.stops, StopMode::Off) {
            StopMode::Record(v) => v,
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Dense parameter leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    /// Rows `rows` of an embedding table, gathered as a `[rows.len() × width]` leaf.
    ///
    /// Gradients flow back to the table as sparse per-row accumulations.
    pub fn lookup(&mut self, id: ParamId, table: &Tensor, rows: &[usize]) -> Result<Var> {
        let (n, width) = table.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return dim_err(format!("lookup row {r} outside table of {n} rows"));
            }
            data.extend_from_slice(table.row(r));
        }
        let value = Tensor::new(vec![rows.len(), width], data)?;
        Ok(self.push(
            value,
            Op::Lookup {
                param: id,
                rows: rows.to_vec(),
            },
            true,
        ))
    }

    /// Forward identity, backward annihilator.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        match &mut self.stops {
            StopMode::Off => {}
            StopMode::Record(log) => log.push(value.clone()),
            StopMode::Replay(log, cursor) => {
                if let Some(v) = log.get(*cursor) {
                    if v.shape() == value.shape() {
                        value = v.clone();
                    }
                }
                *cursor += 1;
            }
        }
        self.push(value, Op::StopGradient, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return dim_err(format!("add {:?} + {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a bias vector (`[n]` or `[1 × n]`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let vb = self.value(bias);
        if vb.len() != n {
            return dim_err(format!(
                "bias {:?} does not broadcast over {:?}",
                vb.shape(),
                self.value(x).shape()
            ));
        }
        let b = vb.data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return dim_err(format!("mul {:?} * {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Multiplies row `i` of `x` (`[m × n]`) by `s[i]` (`s` is `[m × 1]`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let vs = self.value(s);
        if vs.len() != m {
            return dim_err(format!(
                "row scale {:?} does not match {:?}",
                vs.shape(),
                self.value(x).shape()
            ));
        }
        let sd = vs.data();
        let mut data = self.value(x).data().to_vec();
        for (row, si) in data.chunks_mut(n).zip(sd) {
            for o in row.iter_mut() {
                *o *= si;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleRows(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Logistic function with the input clamped to `[-30, 30]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| super::sigmoid(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() {
            return dim_err(format!("softmax axis {axis} on shape {:?}", vx.shape()));
        }
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let mut data = vx.data().to_vec();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = data[base + t * inner];
                }
                softmax_in_place(&mut buf);
                for (t, b) in buf.iter().enumerate() {
                    data[base + t * inner] = *b;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Per-row cosine similarity of two `[m × n]` matrices, as `[m × 1]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return dim_err(format!("cosine {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let (m, n) = va.dims2()?;
        let data = (0..m)
            .map(|i| {
                let (ra, rb) = (&va.data()[i * n..(i + 1) * n], &vb.data()[i * n..(i + 1) * n]);
                dot(ra, rb) / (norm(ra) * norm(rb) + COSINE_EPS)
            })
            .collect();
        let value = Tensor::new(vec![m, 1], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::RowCosine(a, b), rg))
    }

    /// Divides each row by its sum; rows whose sum is within
    /// [`RATIO_GUARD`] of zero become uniform.
    pub fn ratio_normalize(&mut self, c: Var) -> Result<Var> {
        let (m, k) = self.value(c).dims2()?;
        let mut data = self.value(c).data().to_vec();
        for row in data.chunks_mut(k) {
            let d: f64 = row.iter().sum();
            if d.abs() > RATIO_GUARD {
                for v in row.iter_mut() {
                    *v /= d;
                }
            } else {
                row.fill(1.0 / k as f64);
            }
        }
        let value = Tensor::new(vec![m, k], data)?;
        let rg = self.rg(&[c]);
        Ok(self.push(value, Op::RatioNormalize(c), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of zero tensors");
        }
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return dim_err(format!(
                    "concat rows differ: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                ));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if width == 0 || start + width > n {
            return dim_err(format!("column slice {start}..{} of {n}", start + width));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let value = Tensor::new(vec![m, width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of zero tensors");
        }
        let n = self.value(parts[0]).dims2()?.1;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return dim_err(format!(
                    "concat columns differ: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                ));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if count == 0 || start + count > m {
            return dim_err(format!("row slice {start}..{} of {m}", start + count));
        }
        let data = self.value(x).data()[start * n..(start + count) * n].to_vec();
        let value = Tensor::new(vec![count, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return dim_err(format!("gather row {r} of {m}"));
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Weighted binary log-loss `Σ wᵢ·-(yᵢ ln pᵢ + (1-yᵢ) ln(1-pᵢ))` with
    /// `pᵢ` clamped to `[1e-7, 1-1e-7]`.
    pub fn log_loss(&mut self, p: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let vp = self.value(p);
        if vp.len() != labels.len() || labels.len() != weights.len() {
            return dim_err(format!(
                "log-loss over {} probabilities, {} labels, {} weights",
                vp.len(),
                labels.len(),
                weights.len()
            ));
        }
        let mut total = 0.0;
        for ((&pi, &y), &w) in vp.data().iter().zip(labels).zip(weights) {
            total += w * log_loss_term(pi, y);
        }
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::LogLoss {
                p,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over `batch` sequences of `len`
    /// positions, split into `heads` column groups.
    ///
    /// `q`, `k`, `v` are `[batch·len × d]` with sequence `b` occupying rows
    /// `b·len..(b+1)·len`. Padded keys score [`MASK_SCORE`]; padded query
    /// rows produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<Vec<bool>>,
        batch: usize,
        len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.value(q).dims2()?;
        for &x in &[k, v] {
            if self.value(x).dims2()? != (rows, d) {
                return dim_err(format!(
                    "attention inputs {:?} vs {:?}",
                    self.value(q).shape(),
                    self.value(x).shape()
                ));
            }
        }
        if rows != batch * len || mask.len() != rows {
            return dim_err(format!(
                "attention over {rows} rows with batch {batch}, len {len}, mask {}",
                mask.len()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(SamlError::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * len * len];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dk;
                for i in 0..len {
                    let qi = b * len + i;
                    if !mask[qi] {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * len + i) * len..][..len];
                    let qrow = &qd[qi * d + col..qi * d + col + dk];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = b * len + j;
                        *pj = if mask[kj] {
                            dot(qrow, &kd[kj * d + col..kj * d + col + dk]) * scale
                        } else {
                            MASK_SCORE
                        };
                    }
                    softmax_in_place(p);
                    let orow = &mut out[qi * d + col..qi * d + col + dk];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vj = b * len + j;
                        for (o, x) in orow.iter_mut().zip(&vd[vj * d + col..vj * d + col + dk]) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                mask,
                batch,
                len,
                heads,
                probs,
            })),
            rg,
        ))
    }

    /// Mean over the valid positions of each sequence: `[batch·len × d]` to `[batch × d]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: Rc<Vec<bool>>, batch: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if rows != batch * len || mask.len() != rows {
            return dim_err(format!(
                "pooling {rows} rows with batch {batch}, len {len}, mask {}",
                mask.len()
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let count = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let orow = &mut out[b * d..(b + 1) * d];
            for i in 0..len {
                if mask[b * len + i] {
                    let r = (b * len + i) * d;
                    for (o, v) in orow.iter_mut().zip(&src[r..r + d]) {
                        *o += v;
                    }
                }
            }
            let inv = count as f64;
            for o in orow.iter_mut() {
                *o /= inv;
            }
        }
        let value = Tensor::new(vec![batch, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedMeanPool { x, mask, batch, len }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Nodes that do not reach `loss` (or sit behind a stop-gradient) get no
    /// gradient; callers treat a missing gradient as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(SamlError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut dense = BTreeMap::new();
        let mut sparse: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let Some(g) = &grads[id] else { continue };
            match &node.op {
                Op::Param(pid) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                    match dense.get_mut(pid) {
                        None => {
                            dense.insert(*pid, t);
                        }
                        Some(existing) => accumulate(existing, g),
                    }
                }
                Op::Lookup { param, rows } => {
                    let width = node.value.dims2()?.1;
                    let table = sparse.entry(*param).or_default();
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g[i * width..(i + 1) * width];
                        match table.get_mut(&r) {
                            Some(acc) => {
                                for (a, s) in acc.iter_mut().zip(src) {
                                    *a += s;
                                }
                            }
                            None => {
                                table.insert(r, src.to_vec());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        let node_grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients {
            nodes: node_grads,
            dense,
            sparse,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Lookup { .. } | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                if wants(*a) {
                    let buf = grad_buf(grads, *a, m * k);
                    let beta = if buf.1 { 1.0 } else { 0.0 };
                    // dA = G·Bᵀ
                    gemm(m, n, k, g, n, 1, val(*b), 1, n, buf.0, beta);
                }
                if wants(*b) {
                    let buf = grad_buf(grads, *b, k * n);
                    let beta = if buf.1 { 1.0 } else { 0.0 };
                    // dB = Aᵀ·G
                    gemm(k, m, n, val(*a), 1, k, g, n, 1, buf.0, beta);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if wants(*x) {
                        add_into(grads, *x, g);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    add_into(grads, *x, g);
                }
                if wants(*bias) {
                    let n = self.nodes[bias.0].value.len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    add_into(grads, *bias, &gb);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                    add_into(grads, *a, &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    add_into(grads, *b, &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(grads, *x, &d);
            }
            Op::ScaleRows(x, s) => {
                let sd = val(*s);
                let n = g.len() / sd.len();
                if wants(*x) {
                    let mut d = g.to_vec();
                    for (row, si) in d.chunks_mut(n).zip(sd) {
                        for v in row.iter_mut() {
                            *v *= si;
                        }
                    }
                    add_into(grads, *x, &d);
                }
                if wants(*s) {
                    let d: Vec<f64> = g.chunks(n).zip(val(*x).chunks(n)).map(|(gr, xr)| dot(gr, xr)).collect();
                    add_into(grads, *s, &d);
                }
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .zip(val(*x))
                    .map(|((gv, yv), xv)| {
                        if xv.abs() < SIGMOID_CLAMP {
                            gv * yv * (1.0 - yv)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(grads, *x, &d);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let s: f64 = (0..n).map(|t| g[base + t * inner] * y[base + t * inner]).sum();
                        for t in 0..n {
                            let idx = base + t * inner;
                            d[idx] = y[idx] * (g[idx] - s);
                        }
                    }
                }
                add_into(grads, *x, &d);
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let m = g.len();
                let n = va.len() / m;
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for i in 0..m {
                    let (ra, rb) = (&va[i * n..(i + 1) * n], &vb[i * n..(i + 1) * n]);
                    let (na, nb) = (norm(ra), norm(rb));
                    let den = na * nb + COSINE_EPS;
                    let ab = dot(ra, rb);
                    // d/da [ab/den] = b/den - ab·nb·(a/na)/den²
                    let ca = if na > 0.0 { ab * nb / (na * den * den) } else { 0.0 };
                    let cb = if nb > 0.0 { ab * na / (nb * den * den) } else { 0.0 };
                    for t in 0..n {
                        da[i * n + t] = g[i] * (rb[t] / den - ca * ra[t]);
                        db[i * n + t] = g[i] * (ra[t] / den - cb * rb[t]);
                    }
                }
                if wants(*a) {
                    add_into(grads, *a, &da);
                }
                if wants(*b) {
                    add_into(grads, *b, &db);
                }
            }
            Op::RatioNormalize(c) => {
                let vc = val(*c);
                let k = node.value.dims2().unwrap().1;
                let mut d = vec![0.0; vc.len()];
                for ((drow, crow), grow) in d.chunks_mut(k).zip(vc.chunks(k)).zip(g.chunks(k)) {
                    let s: f64 = crow.iter().sum();
                    if s.abs() <= RATIO_GUARD {
                        continue;
                    }
                    let gc = dot(grow, crow) / (s * s);
                    for (dv, gv) in drow.iter_mut().zip(grow) {
                        *dv = gv / s - gc;
                    }
                }
                add_into(grads, *c, &d);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.dims2().unwrap().0;
                let total = g.len() / m;
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.len() / m;
                    if wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        add_into(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                let w = g.len() / m;
                let (buf, _) = grad_buf(grads, *x, m * n);
                for i in 0..m {
                    for t in 0..w {
                        buf[i * n + start + t] += g[i * w + t];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if wants(p) {
                        add_into(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.nodes[x.0].value.dims2().unwrap().1;
                let total = self.nodes[x.0].value.len();
                let (buf, _) = grad_buf(grads, *x, total);
                for (b, v) in buf[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *b += v;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = self.nodes[x.0].value.dims2().unwrap().1;
                let total = self.nodes[x.0].value.len();
                let (buf, _) = grad_buf(grads, *x, total);
                for (i, &r) in rows.iter().enumerate() {
                    for t in 0..n {
                        buf[r * n + t] += g[i * n + t];
                    }
                }
            }
            Op::Reshape(x) => add_into(grads, *x, g),
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                add_into(grads, *x, &vec![g[0]; n]);
            }
            Op::LogLoss { p, labels, weights } => {
                let d: Vec<f64> = val(*p)
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .map(|((&pi, &y), &w)| {
                        if pi > LOG_CLAMP && pi < 1.0 - LOG_CLAMP {
                            -g[0] * w * (y / pi - (1.0 - y) / (1.0 - pi))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(grads, *p, &d);
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, grads),
            Op::MaskedMeanPool { x, mask, batch, len } => {
                let d = g.len() / batch;
                let (buf, _) = grad_buf(grads, *x, batch * len * d);
                for b in 0..*batch {
                    let count = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
                    if count == 0 {
                        continue;
                    }
                    let c = count as f64;
                    for i in 0..*len {
                        if mask[b * len + i] {
                            let r = (b * len + i) * d;
                            for t in 0..d {
                                buf[r + t] += g[b * d + t] / c;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, d) = self.nodes[s.q.0].value.dims2().unwrap();
        let (qd, kd, vd) = (
            self.nodes[s.q.0].value.data(),
            self.nodes[s.k.0].value.data(),
            self.nodes[s.v.0].value.data(),
        );
        let (len, heads) = (s.len, s.heads);
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; len];
        for b in 0..s.batch {
            for h in 0..heads {
                let col = h * dk;
                for i in 0..len {
                    let qi = b * len + i;
                    if !s.mask[qi] {
                        continue;
                    }
                    let p = &s.probs[((b * heads + h) * len + i) * len..][..len];
                    let go = &g[qi * d + col..qi * d + col + dk];
                    for j in 0..len {
                        let vj = (b * len + j) * d + col;
                        dp[j] = dot(go, &vd[vj..vj + dk]);
                        if p[j] != 0.0 {
                            for t in 0..dk {
                                gv[vj + t] += p[j] * go[t];
                            }
                        }
                    }
                    let sum_pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        let kj = b * len + j;
                        if !s.mask[kj] {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - sum_pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let (qo, ko) = (qi * d + col, kj * d + col);
                        for t in 0..dk {
                            gq[qo + t] += ds * kd[ko + t];
                            gk[ko + t] += ds * qd[qo + t];
                        }
                    }
                }
            }
        }
        for (x, d) in [(s.q, gq), (s.k, gk), (s.v, gv)] {
            if self.nodes[x.0].requires_grad {
                add_into(grads, x, &d);
            }
        }
    }
}

fn log_loss_term(p: f64, y: f64) -> f64 {
    let pc = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// `(outer, axis length, inner)` strides of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Mutable gradient buffer for `v`, allocated on first use. The flag is true
/// when the buffer already held a gradient.
fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> (&mut [f64], bool) {
    let existed = grads[v.0].is_some();
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    (buf.as_mut_slice(), existed)
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn accumulate(t: &mut Tensor, d: &[f64]) {
    for (a, x) in t.data_mut().iter_mut().zip(d) {
        *a += x;
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    dense: BTreeMap<ParamId, Tensor>,
    sparse: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a node, or `None` when the node does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a node, zeros when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn dense(&self, id: ParamId) -> Option<&Tensor> {
        self.dense.get(&id)
    }

    /// Per-row gradient of an embedding table, rows in ascending order.
    pub fn sparse(&self, id: ParamId) -> Option<&BTreeMap<usize, Vec<f64>>> {
        self.sparse.get(&id)
    }

    pub fn dense_params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.dense.iter().map(|(k, v)| (*k, v))
    }

    pub fn sparse_params(&self) -> impl Iterator<Item = (ParamId, &BTreeMap<usize, Vec<f64>>)> {
        self.sparse.iter().map(|(k, v)| (*k, v))
    }
}
