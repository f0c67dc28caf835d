//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated. Entries are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Tape::backward`] walks it once from the end.
//!
//! Shape mismatches are programmer errors and panic with both shapes in the
//! message, the same way indexing out of bounds does.

use std::sync::Arc;

use super::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shared index list (edge endpoints, segment ids).
pub type Index = Arc<[usize]>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Index),
    ScatterAddRows(Var, Index),
    SegmentMean { x: Var, seg: Index, counts: Arc<[usize]> },
    SegmentSoftmax { x: Var, seg: Index, n_seg: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    HeadMatMul { x: Var, w: Var, heads: usize },
    HeadDot { a: Var, b: Var, heads: usize },
    HeadScale { x: Var, att: Var, heads: usize },
    Mse { pred: Var, target: Arc<Tensor> },
    BceWithLogits { logits: Var, labels: Arc<[f64]> },
    SoftmaxCrossEntropy { logits: Var, labels: Arc<[usize]> },
}

#[derive(Debug)]
struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exact zeros when `v` is not
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_value(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.entries[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.cols(),
            bv.rows(),
            "matmul shape mismatch: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let out = av.matmul(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what} shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `x + bias`, with a `1 x c` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        assert!(
            bs.0 == 1 && bs.1 == xs.1,
            "add_row shape mismatch: {xs:?} + {bs:?}"
        );
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    /// `x * s` for a `1 x 1` tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects a 1x1 factor, got {:?}", self.shape(s));
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::MulScalar(x, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        assert!(self.shape(x).1 > 0, "softmax over empty rows");
        let out = softmax_rows_value(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        assert!(n > 0, "mean of empty tensor");
        let out = Tensor::scalar(self.value(x).sum() / n as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Index) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(idx.len(), cols);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < xv.rows(), "gather index {j} out of range for {} rows", xv.rows());
            out.row_mut(i).copy_from_slice(xv.row(j));
        }
        let rg = self.rg(x);
        self.push(out, Op::GatherRows(x, idx), rg)
    }

    /// `out[idx[i]] += x[i]` into an `n_out`-row result.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Index, n_out: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), idx.len(), "scatter_add index length mismatch");
        let mut out = Tensor::zeros(n_out, xv.cols());
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < n_out, "scatter index {j} out of range for {n_out} rows");
            for (o, v) in out.row_mut(j).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ScatterAddRows(x, idx), rg)
    }

    /// Mean of the rows belonging to each segment; empty segments give zeros.
    pub fn segment_mean(&mut self, x: Var, seg: Index, n_seg: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), seg.len(), "segment_mean index length mismatch");
        let mut counts = vec![0usize; n_seg];
        let mut out = Tensor::zeros(n_seg, xv.cols());
        for (i, &s) in seg.iter().enumerate() {
            assert!(s < n_seg, "segment id {s} out of range for {n_seg} segments");
            counts[s] += 1;
            for (o, v) in out.row_mut(s).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                out.row_mut(s).iter_mut().for_each(|v| *v *= inv);
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::SegmentMean {
                x,
                seg,
                counts: counts.into(),
            },
            rg,
        )
    }

    /// Column-wise softmax over the rows of each segment.
    pub fn segment_softmax(&mut self, x: Var, seg: Index, n_seg: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), seg.len(), "segment_softmax index length mismatch");
        let cols = xv.cols();
        let mut max = Tensor::filled(n_seg, cols, f64::NEG_INFINITY);
        for (i, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let v = xv.get(i, c);
                if v > max.get(s, c) {
                    max.set(s, c, v);
                }
            }
        }
        let mut out = Tensor::zeros(xv.rows(), cols);
        let mut denom = Tensor::zeros(n_seg, cols);
        for (i, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let e = (xv.get(i, c) - max.get(s, c)).exp();
                out.set(i, c, e);
                denom.set(s, c, denom.get(s, c) + e);
            }
        }
        for (i, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                out.set(i, c, out.get(i, c) / denom.get(s, c));
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentSoftmax { x, seg, n_seg }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch: {} vs {}", pv.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let views: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&views, cols);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Block-diagonal product: column block `h` of `x` (width `dk`) times row
    /// block `h` of `w` (`heads*dk x dk`) gives column block `h` of the output.
    pub fn head_matmul(&mut self, x: Var, w: Var, heads: usize) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert!(
            heads > 0 && ws.0 == xs.1 && ws.0 == heads * ws.1,
            "head_matmul shape mismatch: {xs:?} x {ws:?} with {heads} heads"
        );
        let dk = ws.1;
        let mut out = Tensor::zeros(xs.0, xs.1);
        let (xv, wv) = (self.value(x), self.value(w));
        for h in 0..heads {
            gemm(
                1.0,
                MatRef::col_block(xv, h * dk, dk),
                MatRef::row_block(wv, h * dk, dk),
                0.0,
                MatMut::col_block(&mut out, h * dk, dk),
            );
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::HeadMatMul { x, w, heads }, rg)
    }

    /// Per-head dot product of matching rows: `m x (heads*dk)` twice -> `m x heads`.
    pub fn head_dot(&mut self, a: Var, b: Var, heads: usize) -> Var {
        self.binary_same_shape(a, b, "head_dot");
        let (m, width) = self.shape(a);
        assert!(heads > 0 && width % heads == 0, "head_dot width {width} not divisible by {heads}");
        let dk = width / heads;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(m, heads);
        for i in 0..m {
            let (ar, br) = (av.row(i), bv.row(i));
            for h in 0..heads {
                let s: f64 = ar[h * dk..(h + 1) * dk]
                    .iter()
                    .zip(&br[h * dk..(h + 1) * dk])
                    .map(|(p, q)| p * q)
                    .sum();
                out.set(i, h, s);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::HeadDot { a, b, heads }, rg)
    }

    /// Scales column block `h` of `x` by `att[:, h]`.
    pub fn head_scale(&mut self, x: Var, att: Var, heads: usize) -> Var {
        let (xs, as_) = (self.shape(x), self.shape(att));
        assert!(
            as_ == (xs.0, heads) && heads > 0 && xs.1 % heads == 0,
            "head_scale shape mismatch: {xs:?} by {as_:?} with {heads} heads"
        );
        let dk = xs.1 / heads;
        let mut out = self.value(x).clone();
        let av = self.value(att);
        for i in 0..xs.0 {
            let row = out.row_mut(i);
            for h in 0..heads {
                let a = av.get(i, h);
                row[h * dk..(h + 1) * dk].iter_mut().for_each(|v| *v *= a);
            }
        }
        let rg = self.rg(x) || self.rg(att);
        self.push(out, Op::HeadScale { x, att, heads }, rg)
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        assert_eq!(
            self.shape(pred),
            target.shape(),
            "mse shape mismatch: {:?} vs {:?}",
            self.shape(pred),
            target.shape()
        );
        assert!(!target.is_empty(), "mse of empty tensors");
        let pv = self.value(pred);
        let n = pv.len() as f64;
        let loss: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: Arc::new(target),
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of `m x 1` logits against {0,1} labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let (m, c) = self.shape(logits);
        assert!(c == 1 && m == labels.len() && m > 0, "bce shape mismatch: {:?} vs {} labels", (m, c), labels.len());
        let zv = self.value(logits);
        let loss = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - z * y)
            .sum::<f64>()
            / m as f64;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.into(),
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `m x k` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (m, k) = self.shape(logits);
        assert!(m == labels.len() && m > 0, "cross-entropy shape mismatch: {:?} vs {} labels", (m, k), labels.len());
        let zv = self.value(logits);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "label {y} out of range for {k} classes");
            let row = zv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / m as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.into(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.shape(loss),
            (1, 1),
            "backward needs a 1x1 loss, got {:?}",
            self.shape(loss)
        );
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.entries.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for k in (0..n).rev() {
            let Some(g) = grads[k].take() else { continue };
            let entry = &self.entries[k];
            if !entry.requires_grad {
                continue;
            }
            self.propagate(&entry.op, &entry.value, &g, &mut grads);
            grads[k] = Some(g);
        }
        let shapes = self.entries.iter().map(|e| e.value.shape()).collect();
        Gradients { grads, shapes }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulates into `grads[v]` through a closure that writes into a
    /// zero-initialized or existing buffer.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    gemm(1.0, MatRef::new(g), MatRef::new(bv).t(), 1.0, MatMut::new(ga));
                });
                self.accumulate_with(grads, *b, |gb| {
                    gemm(1.0, MatRef::new(av).t(), MatRef::new(g), 1.0, MatMut::new(gb));
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, gg), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gg * y;
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for ((o, gg), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gg * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate_with(grads, *bias, |gb| {
                    let row = gb.row_mut(0);
                    for r in 0..g.rows() {
                        for (o, v) in row.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let k = self.value(*s).item();
                self.accumulate(grads, *x, g.map(|v| v * k));
                let xv = self.value(*x);
                self.accumulate_with(grads, *s, |gs| {
                    let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    gs.data_mut()[0] += dot;
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accumulate_with(grads, *x, |gx| {
                    for ((o, gg), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gg * gelu_grad(*v);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                self.accumulate_with(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yy), gg) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *o += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::GatherRows(x, idx) => {
                self.accumulate_with(grads, *x, |gx| {
                    for (i, &j) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ScatterAddRows(x, idx) => {
                self.accumulate_with(grads, *x, |gx| {
                    for (i, &j) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(j)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SegmentMean { x, seg, counts } => {
                self.accumulate_with(grads, *x, |gx| {
                    for (i, &s) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(s)) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::SegmentSoftmax { x, seg, n_seg } => {
                let cols = out.cols();
                let mut dots = Tensor::zeros(*n_seg, cols);
                for (i, &s) in seg.iter().enumerate() {
                    for c in 0..cols {
                        dots.set(s, c, dots.get(s, c) + out.get(i, c) * g.get(i, c));
                    }
                }
                self.accumulate_with(grads, *x, |gx| {
                    for (i, &s) in seg.iter().enumerate() {
                        for c in 0..cols {
                            let d = out.get(i, c) * (g.get(i, c) - dots.get(s, c));
                            gx.set(i, c, gx.get(i, c) + d);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.accumulate_with(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    let c = g.cols();
                    self.accumulate_with(grads, p, |gp| {
                        for (o, v) in gp.data_mut().iter_mut().zip(&g.data()[off * c..(off + h) * c]) {
                            *o += v;
                        }
                    });
                    off += h;
                }
            }
            Op::HeadMatMul { x, w, heads } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let dk = wv.cols();
                self.accumulate_with(grads, *x, |gx| {
                    for h in 0..*heads {
                        gemm(
                            1.0,
                            MatRef::col_block(g, h * dk, dk),
                            MatRef::row_block(wv, h * dk, dk).t(),
                            1.0,
                            MatMut::col_block(gx, h * dk, dk),
                        );
                    }
                });
                self.accumulate_with(grads, *w, |gw| {
                    for h in 0..*heads {
                        gemm(
                            1.0,
                            MatRef::col_block(xv, h * dk, dk).t(),
                            MatRef::col_block(g, h * dk, dk),
                            1.0,
                            MatMut::row_block(gw, h * dk, dk),
                        );
                    }
                });
            }
            Op::HeadDot { a, b, heads } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let dk = av.cols() / heads;
                let spread = |other: &Tensor, target: &mut Tensor| {
                    for i in 0..g.rows() {
                        let orow = other.row(i);
                        let trow = target.row_mut(i);
                        for h in 0..*heads {
                            let gg = g.get(i, h);
                            for k in h * dk..(h + 1) * dk {
                                trow[k] += gg * orow[k];
                            }
                        }
                    }
                };
                self.accumulate_with(grads, *a, |ga| spread(bv, ga));
                self.accumulate_with(grads, *b, |gb| spread(av, gb));
            }
            Op::HeadScale { x, att, heads } => {
                let (xv, attv) = (self.value(*x), self.value(*att));
                let dk = xv.cols() / heads;
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..g.rows() {
                        let grow = g.row(i);
                        let orow = gx.row_mut(i);
                        for h in 0..*heads {
                            let a = attv.get(i, h);
                            for k in h * dk..(h + 1) * dk {
                                orow[k] += grow[k] * a;
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *att, |ga| {
                    for i in 0..g.rows() {
                        let (grow, xrow) = (g.row(i), xv.row(i));
                        for h in 0..*heads {
                            let s: f64 = (h * dk..(h + 1) * dk).map(|k| grow[k] * xrow[k]).sum();
                            ga.set(i, h, ga.get(i, h) + s);
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let scale = 2.0 * g.item() / pv.len() as f64;
                self.accumulate_with(grads, *pred, |gp| {
                    for ((o, p), t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                        *o += scale * (p - t);
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let zv = self.value(*logits);
                let scale = g.item() / labels.len() as f64;
                self.accumulate_with(grads, *logits, |gz| {
                    for ((o, z), y) in gz.data_mut().iter_mut().zip(zv.data()).zip(labels.iter()) {
                        *o += scale * (sigmoid(*z) - y);
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let probs = softmax_rows_value(self.value(*logits));
                let scale = g.item() / labels.len() as f64;
                self.accumulate_with(grads, *logits, |gz| {
                    for (i, &y) in labels.iter().enumerate() {
                        for (c, (o, p)) in gz.row_mut(i).iter_mut().zip(probs.row(i)).enumerate() {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            *o += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}
