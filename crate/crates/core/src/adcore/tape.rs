use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AdError, SegmentIndex, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Elementwise nonlinearity.
///
/// The derivative at exactly 0 is taken from the positive branch (1 for
/// every kind), so `phi(x) = x * phi'(x)` holds at the kink too.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Elu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    /// True for activations with `phi(c x) = c phi(x)` for all `c > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        !matches!(self, Activation::Elu)
    }

    pub fn validate(self) -> Result<(), AdError> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(AdError::InvalidSlope(s)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Tensor),
    GatherRows(usize, Arc<[usize]>),
    SegmentSoftmax(usize, Arc<SegmentIndex>),
    SegmentWeightedSum { values: usize, weights: usize, seg: Arc<SegmentIndex> },
    Activation(usize, Activation),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Sum(usize),
    CrossEntropy { logits: usize, labels: Arc<[usize]>, mask: Arc<[usize]>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so inputs always precede outputs.
/// A tape supports exactly one [`Tape::backward`] call, which consumes it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, AdError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AdError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad, is_param: false });
        Ok(Var { tape: self.id, index })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a trainable leaf. Every parameter receives a gradient from
    /// `backward`, zero if the loss does not depend on it.
    pub fn param(&mut self, value: Tensor) -> Result<Var, AdError> {
        let v = self.push(value, Op::Leaf, true, "param")?;
        self.nodes[v.index].is_param = true;
        Ok(v)
    }

    /// Records a detached leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, AdError> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, Op::MatMul(ia, ib), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.transpose();
        let rg = self.rg(ia);
        self.push(out, Op::Transpose(ia), rg, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(AdError::ShapeMismatch { op: "add", lhs: va.shape(), rhs: vb.shape() });
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, Op::Add(ia, ib), rg, "add")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AdError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x * factor);
        let rg = self.rg(ia);
        self.push(out, Op::Scale(ia, factor), rg, "scale")
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var, AdError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if va.shape() != mask.shape() {
            return Err(AdError::ShapeMismatch { op: "mul_const", lhs: va.shape(), rhs: mask.shape() });
        }
        let data = va.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.rg(ia);
        self.push(out, Op::MulConst(ia, mask), rg, "mul_const")
    }

    /// Row `e` of the result is row `idx[e]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var, AdError> {
        let ix = self.idx(x)?;
        let src = &self.nodes[ix].value;
        let (n, d) = src.shape();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= n {
                return Err(AdError::IndexOutOfRange { index: i, bound: n });
            }
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(idx.len(), d, data)?;
        let rg = self.rg(ix);
        self.push(out, Op::GatherRows(ix, idx), rg, "gather_rows")
    }

    /// Softmax of an `E x 1` score column within each target segment.
    pub fn segment_softmax(&mut self, scores: Var, seg: Arc<SegmentIndex>) -> Result<Var, AdError> {
        let is = self.idx(scores)?;
        let s = &self.nodes[is].value;
        if s.cols() != 1 || s.rows() != seg.num_edges() {
            return Err(AdError::ShapeMismatch { op: "segment_softmax", lhs: s.shape(), rhs: (seg.num_edges(), 1) });
        }
        seg.check_consistent()?;
        let out = Tensor::column(&segment_softmax_values(s.data(), &seg));
        let rg = self.rg(is);
        self.push(out, Op::SegmentSoftmax(is, seg), rg, "segment_softmax")
    }

    /// Row `v` of the result is the weighted sum of the value rows of the
    /// edges targeting `v`; nodes without in-edges get a zero row.
    pub fn segment_weighted_sum(&mut self, values: Var, weights: Var, seg: Arc<SegmentIndex>) -> Result<Var, AdError> {
        let (iv, iw) = (self.idx(values)?, self.idx(weights)?);
        let (vals, w) = (&self.nodes[iv].value, &self.nodes[iw].value);
        if vals.rows() != seg.num_edges() || w.rows() != seg.num_edges() || w.cols() != 1 {
            return Err(AdError::ShapeMismatch { op: "segment_weighted_sum", lhs: vals.shape(), rhs: w.shape() });
        }
        seg.check_consistent()?;
        let d = vals.cols();
        let mut out = Tensor::zeros(seg.num_nodes(), d);
        for v in 0..seg.num_nodes() {
            let row = out.row_mut(v);
            for e in seg.segment(v) {
                let we = w.data()[e];
                for (o, x) in row.iter_mut().zip(vals.row(e)) {
                    *o += we * x;
                }
            }
        }
        let rg = self.rg(iv) || self.rg(iw);
        self.push(out, Op::SegmentWeightedSum { values: iv, weights: iw, seg }, rg, "segment_weighted_sum")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, AdError> {
        kind.validate()?;
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| kind.apply(v));
        let rg = self.rg(ix);
        self.push(out, Op::Activation(ix, kind), rg, "activation")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AdError> {
        let ix = self.idx(x)?;
        let src = &self.nodes[ix].value;
        if start > end || end > src.cols() {
            return Err(AdError::IndexOutOfRange { index: end, bound: src.cols() });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(src.rows() * w);
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let out = Tensor::new(src.rows(), w, data)?;
        let rg = self.rg(ix);
        self.push(out, Op::SliceCols(ix, start), rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(AdError::EmptyInput("concat_cols"));
        };
        let rows = self.nodes[first].value.rows();
        let mut total = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rows() != rows {
                return Err(AdError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[first].value.shape(),
                    rhs: v.shape(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let out = Tensor::new(rows, total, data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(out, Op::ConcatCols(idx), rg, "concat_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AdError> {
        let ix = self.idx(x)?;
        let s: f64 = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(ix);
        self.push(Tensor::filled(1, 1, s), Op::Sum(ix), rg, "sum")
    }

    /// Mean over `mask` of `-log softmax(logits[v])[labels[v]]`, using
    /// log-sum-exp stabilization.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<[usize]>,
        mask: Arc<[usize]>,
    ) -> Result<Var, AdError> {
        let il = self.idx(logits)?;
        if mask.is_empty() {
            return Err(AdError::EmptyInput("masked_cross_entropy mask"));
        }
        let z = &self.nodes[il].value;
        let c = z.cols();
        let mut probs = Tensor::zeros(mask.len(), c);
        let mut total = 0.0;
        for (m, &v) in mask.iter().enumerate() {
            if v >= z.rows() {
                return Err(AdError::IndexOutOfRange { index: v, bound: z.rows() });
            }
            let y = labels[v];
            if y >= c {
                return Err(AdError::IndexOutOfRange { index: y, bound: c });
            }
            let row = z.row(v);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[y];
            for (p, x) in probs.row_mut(m).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / mask.len() as f64;
        let rg = self.rg(il);
        self.push(
            Tensor::filled(1, 1, loss),
            Op::CrossEntropy { logits: il, labels, mask, probs },
            rg,
            "masked_cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`. Adjoints accumulate additively in
    /// node order, so repeated runs are bit-identical.
    pub fn backward(self, loss: Var) -> Result<Gradients, AdError> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.shape() != (1, 1) {
            return Err(AdError::NotScalar(lv.shape()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[il] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[i].is_none() {
                let (r, c) = node.value.shape();
                grads[i] = Some(Tensor::zeros(r, c));
            } else if !node.is_param {
                // only parameter adjoints are exposed
                grads[i] = None;
            }
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(AdError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), AdError> {
        let nodes = &self.nodes;
        let mut acc = |j: usize, contrib: Tensor| {
            if !nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if nodes[*a].requires_grad {
                    acc(*a, g.matmul(&vb.transpose())?);
                }
                if nodes[*b].requires_grad {
                    acc(*b, va.transpose().matmul(g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::MulConst(a, mask) => {
                let data = g.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
                acc(*a, Tensor::new(g.rows(), g.cols(), data)?);
            }
            Op::GatherRows(x, idx) => {
                let (n, d) = nodes[*x].value.shape();
                let mut out = Tensor::zeros(n, d);
                for (e, &src) in idx.iter().enumerate() {
                    let gr = g.row(e);
                    for (o, v) in out.row_mut(src).iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                acc(*x, out);
            }
            Op::SegmentSoftmax(s, seg) => {
                let y = &nodes[i].value;
                let mut out = Tensor::zeros(y.rows(), 1);
                for v in 0..seg.num_nodes() {
                    let r = seg.segment(v);
                    let dot: f64 = r.clone().map(|e| y.data()[e] * g.data()[e]).sum();
                    for e in r {
                        out.data_mut()[e] = y.data()[e] * (g.data()[e] - dot);
                    }
                }
                acc(*s, out);
            }
            Op::SegmentWeightedSum { values, weights, seg } => {
                let (vals, w) = (&nodes[*values].value, &nodes[*weights].value);
                if nodes[*values].requires_grad {
                    let mut out = Tensor::zeros(vals.rows(), vals.cols());
                    for v in 0..seg.num_nodes() {
                        let gv = g.row(v);
                        for e in seg.segment(v) {
                            let we = w.data()[e];
                            for (o, x) in out.row_mut(e).iter_mut().zip(gv) {
                                *o = we * x;
                            }
                        }
                    }
                    acc(*values, out);
                }
                if nodes[*weights].requires_grad {
                    let mut out = Tensor::zeros(w.rows(), 1);
                    for v in 0..seg.num_nodes() {
                        let gv = g.row(v);
                        for e in seg.segment(v) {
                            out.data_mut()[e] = vals.row(e).iter().zip(gv).map(|(a, b)| a * b).sum();
                        }
                    }
                    acc(*weights, out);
                }
            }
            Op::Activation(x, kind) => {
                let xv = &nodes[*x].value;
                let data = xv.data().iter().zip(g.data()).map(|(&a, &b)| b * kind.derivative(a)).collect();
                acc(*x, Tensor::new(g.rows(), g.cols(), data)?);
            }
            Op::SliceCols(x, start) => {
                let (r, c) = nodes[*x].value.shape();
                let mut out = Tensor::zeros(r, c);
                let w = g.cols();
                for row in 0..r {
                    out.row_mut(row)[*start..start + w].copy_from_slice(g.row(row));
                }
                acc(*x, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = nodes[p].value.shape();
                    let mut out = Tensor::zeros(r, c);
                    for row in 0..r {
                        out.row_mut(row).copy_from_slice(&g.row(row)[offset..offset + c]);
                    }
                    offset += c;
                    acc(p, out);
                }
            }
            Op::Sum(x) => {
                let (r, c) = nodes[*x].value.shape();
                acc(*x, Tensor::filled(r, c, g.data()[0]));
            }
            Op::CrossEntropy { logits, labels, mask, probs } => {
                let (r, c) = nodes[*logits].value.shape();
                let mut out = Tensor::zeros(r, c);
                let scale = g.data()[0] / mask.len() as f64;
                for (m, &v) in mask.iter().enumerate() {
                    let row = out.row_mut(v);
                    for (o, p) in row.iter_mut().zip(probs.row(m)) {
                        *o += scale * p;
                    }
                    row[labels[v]] -= scale;
                }
                acc(*logits, out);
            }
        }
        Ok(())
    }
}

/// Per-segment softmax with max subtraction. Shared by the tape op and by
/// untracked evaluation paths.
pub fn segment_softmax_values(scores: &[f64], seg: &SegmentIndex) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    for v in 0..seg.num_nodes() {
        let r = seg.segment(v);
        if r.is_empty() {
            continue;
        }
        let max = scores[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in r.clone() {
            let x = (scores[e] - max).exp();
            out[e] = x;
            total += x;
        }
        for e in r {
            out[e] /= total;
        }
    }
    out
}
