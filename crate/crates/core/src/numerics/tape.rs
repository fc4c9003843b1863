//! Reverse-mode differentiation over a linear record of coarse operations.
//!
//! Each method on [`Tape`] evaluates one operation eagerly, stores its value,
//! and remembers how to push an upstream gradient back to its inputs.
//! [`Tape::backward`] walks the record in reverse from a scalar loss.

use super::kernels::{self, AttnGeom, ConvGeom, SeqConvGeom};
use super::real::{real, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2d { x: Var, window: usize },
    SpatialMean { x: Var },
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    SeqConv { x: Var, w: Var, b: Var, geom: SeqConvGeom },
    SegmentMean { x: Var, seg: usize },
    GatherRows { x: Var, index: Vec<usize> },
    ScaleRows { x: Var, factors: Vec<T> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CosinePairs { a: Var, b: Var, pairs: Vec<(usize, usize)>, eps: T },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    NllProbs { probs: Var, labels: Vec<usize>, clamp: T },
    MaskedMse { pred: Var, target: Var, rows: Vec<usize> },
    Pick { x: Var, index: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every recorded value that depends on a
/// gradient-requiring leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recorded computation graph. Single-threaded; build one tape per unit of work.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn as_matrix<T: Real>(op: &str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(format!("{op}: expected a matrix, got {:?}", t.shape()))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Leaves with `requires_grad` receive gradients in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect(),
        )?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect(),
        )?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect(),
        )?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let out = Tensor::scalar(x.sum() / real::<T>(x.len() as f64));
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner extents {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), T::zero(), &mut out, (n, 1));
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Affine map along the last axis: `x[.., d_in] · w[d_in, d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (d_in, d_out) = as_matrix("linear weight", self.value(w))?;
        if xv.last_dim() != d_in || xv.ndim() == 0 {
            return Err(Error::dim(format!("linear: input {:?} vs weight [{d_in}, {d_out}]", xv.shape())));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [d_out] {
                return Err(Error::dim(format!("linear: bias {:?} vs d_out {d_out}", self.value(b).shape())));
            }
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(rows, d_in, d_out, T::one(), xv.data(), (d_in, 1), self.value(w).data(), (d_out, 1), T::one(), &mut out, (d_out, 1));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = d_out;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", Tensor::new(shape, out)?, Op::Linear { x, w, b }, &inputs)
    }

    /// Cross-correlation with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(x, k, b, stride, padding, padding)
    }

    pub fn conv2d_padded(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let geom = ConvGeom::new(xv.shape(), self.value(k).shape(), stride, pad_h, pad_w)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::dim(format!("conv2d: bias {:?} vs {} channels", self.value(b).shape(), geom.c_out)));
            }
        }
        let out = kernels::conv2d_forward(&geom, xv.data(), self.value(k).data(), b.map(|b| self.value(b).data()));
        let shape = geom.output_shape(xv.ndim() == 4);
        let mut inputs = vec![x, k];
        inputs.extend(b);
        self.push("conv2d", Tensor::new(shape, out)?, Op::Conv2d { x, k, b, geom }, &inputs)
    }

    /// Mean over non-overlapping `window×window` blocks of the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = self.value(x);
        let nd = xv.ndim();
        if nd < 2 || window == 0 {
            return Err(Error::dim(format!("avg_pool2d: input {:?}, window {window}", xv.shape())));
        }
        let (h, w) = (xv.shape()[nd - 2], xv.shape()[nd - 1]);
        if h % window != 0 || w % window != 0 {
            return Err(Error::dim(format!("avg_pool2d: {h}x{w} not divisible by window {window}")));
        }
        let out = kernels::avg_pool2d_forward(xv.data(), h, w, window);
        let mut shape = xv.shape().to_vec();
        shape[nd - 2] = h / window;
        shape[nd - 1] = w / window;
        self.push("avg_pool2d", Tensor::new(shape, out)?, Op::AvgPool2d { x, window }, &[x])
    }

    /// Global average over the last two axes: `[.., H, W] -> [..]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let nd = xv.ndim();
        if nd < 3 {
            return Err(Error::dim(format!("spatial_mean: input {:?}", xv.shape())));
        }
        let plane = xv.shape()[nd - 2] * xv.shape()[nd - 1];
        let inv = T::one() / real::<T>(plane as f64);
        let out: Vec<T> = xv.data().chunks(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let shape = xv.shape()[..nd - 2].to_vec();
        self.push("spatial_mean", Tensor::new(shape, out)?, Op::SpatialMean { x }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let out = Tensor::new(xv.shape().to_vec(), kernels::softmax_rows(xv.data(), d))?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Normalizes each vector along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 || self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            xv.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            eps,
        );
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Multi-head scaled dot-product attention over `rows / seq` independent sequences.
    ///
    /// `q`, `k`, `v` are `[groups·seq, dim]` projections; returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        let (rows, dim) = as_matrix("attention", self.value(q))?;
        if self.value(k).shape() != [rows, dim] || self.value(v).shape() != [rows, dim] {
            return Err(Error::dim("attention: q, k, v shapes differ"));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::dim(format!("attention: dim {dim} not divisible by {heads} heads")));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::dim(format!("attention: {rows} rows not divisible by sequence length {seq}")));
        }
        let geom = AttnGeom { groups: rows / seq, seq, dim, heads };
        let (out, probs) =
            kernels::attention_forward(&geom, self.value(q).data(), self.value(k).data(), self.value(v).data());
        self.push("attention", Tensor::new(vec![rows, dim], out)?, Op::Attention { q, k, v, geom, probs }, &[q, k, v])
    }

    /// 1×k convolution along rows of `[groups·seq, c_in]`, zero-padded to keep length.
    pub fn seq_conv(&mut self, x: Var, w: Var, b: Var, seq: usize) -> Result<Var> {
        let (rows, c_in) = as_matrix("seq_conv", self.value(x))?;
        let [c_out, kc, 1, taps] = *self.value(w).shape() else {
            return Err(Error::dim(format!("seq_conv: kernel must be [c_out, c_in, 1, k], got {:?}", self.value(w).shape())));
        };
        if kc != c_in || taps % 2 == 0 || seq == 0 || rows % seq != 0 || self.value(b).shape() != [c_out] {
            return Err(Error::dim(format!(
                "seq_conv: input {:?}, kernel {:?}, bias {:?}, seq {seq}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let geom = SeqConvGeom { rows, seq, c_in, c_out, taps };
        let out = kernels::seq_conv_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        self.push("seq_conv", Tensor::new(vec![rows, c_out], out)?, Op::SeqConv { x, w, b, geom }, &[x, w, b])
    }

    /// Mean of consecutive row blocks: `[groups·seg, d] -> [groups, d]`.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Result<Var> {
        let (rows, d) = as_matrix("segment_mean", self.value(x))?;
        if seg == 0 || rows % seg != 0 {
            return Err(Error::dim(format!("segment_mean: {rows} rows, segment {seg}")));
        }
        let inv = T::one() / real::<T>(seg as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows / seg * d];
        for r in 0..rows {
            let dst = &mut out[(r / seg) * d..(r / seg + 1) * d];
            for (o, &v) in dst.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o += v * inv;
            }
        }
        self.push("segment_mean", Tensor::new(vec![rows / seg, d], out)?, Op::SegmentMean { x, seg }, &[x])
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 {
            return Err(Error::dim("gather_rows on a scalar"));
        }
        let n = xv.shape()[0];
        let stride = xv.len() / n.max(1);
        let mut data = Vec::with_capacity(index.len() * stride);
        for &i in &index {
            if i >= n {
                return Err(Error::dim(format!("gather_rows: index {i} out of {n}")));
            }
            data.extend_from_slice(&xv.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        self.push("gather_rows", Tensor::new(shape, data)?, Op::GatherRows { x, index }, &[x])
    }

    /// Multiplies each first-axis row by its factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 || xv.shape()[0] != factors.len() {
            return Err(Error::dim(format!("scale_rows: input {:?}, {} factors", xv.shape(), factors.len())));
        }
        let stride = xv.len() / factors.len().max(1);
        let mut out = xv.clone();
        for (row, &f) in out.data_mut().chunks_mut(stride.max(1)).zip(&factors) {
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        self.push("scale_rows", out, Op::ScaleRows { x, factors }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_rows(&values)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols of zero tensors"))?;
        let (rows, _) = as_matrix("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        self.push("concat_cols", Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Cosine similarity `a_i·b_j / max(‖a_i‖‖b_j‖, eps)` for each `(i, j)` pair of rows.
    pub fn cosine_pairs(&mut self, a: Var, b: Var, pairs: Vec<(usize, usize)>, eps: T) -> Result<Var> {
        let (ra, d) = as_matrix("cosine_pairs", self.value(a))?;
        let (rb, d2) = as_matrix("cosine_pairs", self.value(b))?;
        if d != d2 {
            return Err(Error::dim(format!("cosine_pairs: dims {d} and {d2} differ")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i >= ra || j >= rb {
                return Err(Error::dim(format!("cosine_pairs: pair ({i}, {j}) out of range")));
            }
            out.push(cosine(av.row(i), bv.row(j), eps));
        }
        let n = out.len();
        self.push("cosine_pairs", Tensor::new(vec![n], out)?, Op::CosinePairs { a, b, pairs, eps }, &[a, b])
    }

    /// Mean over rows of `logsumexp(logits_i) − logits_i[target_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let (rows, c) = as_matrix("cross_entropy", self.value(logits))?;
        if targets.len() != rows || rows == 0 || targets.iter().any(|&t| t >= c) {
            return Err(Error::dim(format!("cross_entropy: {rows}x{c} logits, targets {targets:?}")));
        }
        let lv = self.value(logits).data();
        let probs = kernels::softmax_rows(lv, c);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[t];
        }
        loss /= real::<T>(rows as f64);
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }, &[logits])
    }

    /// Mean over rows of `−ln max(p_i[label_i], clamp)` on probability rows.
    pub fn nll_probs(&mut self, probs: Var, labels: Vec<usize>, clamp: T) -> Result<Var> {
        let (rows, c) = as_matrix("nll_probs", self.value(probs))?;
        if labels.len() != rows || rows == 0 || labels.iter().any(|&t| t >= c) {
            return Err(Error::dim(format!("nll_probs: {rows}x{c} probabilities, labels {labels:?}")));
        }
        let pv = self.value(probs).data();
        let loss = labels.iter().enumerate().map(|(r, &t)| -pv[r * c + t].max(clamp).ln()).sum::<T>()
            / real::<T>(rows as f64);
        self.push("nll_probs", Tensor::scalar(loss), Op::NllProbs { probs, labels, clamp }, &[probs])
    }

    /// Mean over the listed rows of the per-row mean squared difference.
    pub fn masked_mse(&mut self, pred: Var, target: Var, rows: Vec<usize>) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        same_shape("masked_mse", pv, tv)?;
        let (n, d) = as_matrix("masked_mse", pv)?;
        if rows.is_empty() {
            return Err(Error::Contract("masked_mse over an empty row set".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim(format!("masked_mse: row {bad} out of {n}")));
        }
        let mut loss = T::zero();
        for &r in &rows {
            loss += pv.row(r).iter().zip(tv.row(r)).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>();
        }
        loss /= real::<T>((rows.len() * d) as f64);
        self.push("masked_mse", Tensor::scalar(loss), Op::MaskedMse { pred, target, rows }, &[pred, target])
    }

    /// Extracts one element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.len() {
            return Err(Error::dim(format!("pick: index {index} out of {}", xv.len())));
        }
        let out = Tensor::scalar(xv.data()[index]);
        self.push("pick", out, Op::Pick { x, index }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every value that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.needs(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut()
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(t) = self.acc(grads, v) {
                        t.add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(t) = self.acc(grads, *a) {
                    t.add_assign(g);
                }
                if let Some(t) = self.acc(grads, *b) {
                    t.data_mut().iter_mut().zip(gd).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(t) = self.acc(grads, *a) {
                    for ((x, &y), &o) in t.data_mut().iter_mut().zip(gd).zip(bv.data()) {
                        *x += y * o;
                    }
                }
                if let Some(t) = self.acc(grads, *b) {
                    for ((x, &y), &o) in t.data_mut().iter_mut().zip(gd).zip(av.data()) {
                        *x += y * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(t) = self.acc(grads, *a) {
                    t.data_mut().iter_mut().zip(gd).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Op::Square(a) => {
                let av = self.value(*a);
                if let Some(t) = self.acc(grads, *a) {
                    for ((x, &y), &v) in t.data_mut().iter_mut().zip(gd).zip(av.data()) {
                        *x += real::<T>(2.0) * v * y;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(t) = self.acc(grads, *a) {
                    t.data_mut().iter_mut().for_each(|x| *x += gd[0]);
                }
            }
            Op::Mean(a) => {
                let n = real::<T>(self.value(*a).len() as f64);
                if let Some(t) = self.acc(grads, *a) {
                    t.data_mut().iter_mut().for_each(|x| *x += gd[0] / n);
                }
            }
            Op::Reshape(a) => {
                if let Some(t) = self.acc(grads, *a) {
                    t.data_mut().iter_mut().zip(gd).for_each(|(x, &y)| *x += y);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(t) = self.acc(grads, *a) {
                    T::gemm(m, n, k, T::one(), gd, (n, 1), bv.data(), (1, n), T::one(), t.data_mut(), (k, 1));
                }
                if let Some(t) = self.acc(grads, *b) {
                    T::gemm(k, m, n, T::one(), av.data(), (1, k), gd, (n, 1), T::one(), t.data_mut(), (n, 1));
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if let Some(t) = self.acc(grads, *x) {
                    T::gemm(rows, d_out, d_in, T::one(), gd, (d_out, 1), wv.data(), (1, d_out), T::one(), t.data_mut(), (d_in, 1));
                }
                if let Some(t) = self.acc(grads, *w) {
                    T::gemm(d_in, rows, d_out, T::one(), xv.data(), (1, d_in), gd, (d_out, 1), T::one(), t.data_mut(), (d_out, 1));
                }
                if let Some(b) = b {
                    if let Some(t) = self.acc(grads, *b) {
                        for row in gd.chunks(d_out) {
                            t.data_mut().iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let mut gx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut gk = self.needs(*k).then(|| Tensor::zeros(kv.shape()));
                let mut gb = b.filter(|&b| self.needs(b)).map(|b| Tensor::zeros(self.value(b).shape()));
                kernels::conv2d_backward(
                    geom,
                    xv.data(),
                    kv.data(),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, part) in [(Some(*x), gx), (Some(*k), gk), (*b, gb)] {
                    if let (Some(v), Some(part)) = (v, part) {
                        if let Some(t) = self.acc(grads, v) {
                            t.add_assign(&part);
                        }
                    }
                }
            }
            Op::AvgPool2d { x, window } => {
                let shape = self.value(*x).shape().to_vec();
                let nd = shape.len();
                if let Some(t) = self.acc(grads, *x) {
                    kernels::avg_pool2d_backward(gd, t.data_mut(), shape[nd - 2], shape[nd - 1], *window);
                }
            }
            Op::SpatialMean { x } => {
                let shape = self.value(*x).shape().to_vec();
                let nd = shape.len();
                let plane = shape[nd - 2] * shape[nd - 1];
                let inv = T::one() / real::<T>(plane as f64);
                if let Some(t) = self.acc(grads, *x) {
                    for (chunk, &y) in t.data_mut().chunks_mut(plane).zip(gd) {
                        chunk.iter_mut().for_each(|v| *v += y * inv);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(t) = self.acc(grads, *x) {
                    for ((o, &y), &v) in t.data_mut().iter_mut().zip(gd).zip(xv.data()) {
                        *o += y * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let yv = node.value.data();
                if let Some(t) = self.acc(grads, *x) {
                    kernels::softmax_rows_backward(yv, gd, t.data_mut(), d);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gamma_v = self.value(*gamma);
                let d = gamma_v.len();
                let mut gx = self.needs(*x).then(|| Tensor::zeros(self.value(*x).shape()));
                let mut gg = self.needs(*gamma).then(|| Tensor::zeros(&[d]));
                let mut gbt = self.needs(*beta).then(|| Tensor::zeros(&[d]));
                kernels::layer_norm_backward(
                    gd,
                    xhat,
                    inv_std,
                    gamma_v.data(),
                    d,
                    gx.as_mut().map(|t| t.data_mut()),
                    gg.as_mut().map(|t| t.data_mut()),
                    gbt.as_mut().map(|t| t.data_mut()),
                );
                for (v, part) in [(*x, gx), (*gamma, gg), (*beta, gbt)] {
                    if let Some(part) = part {
                        if let Some(t) = self.acc(grads, v) {
                            t.add_assign(&part);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = Tensor::zeros(qv.shape());
                let mut gk = Tensor::zeros(kv.shape());
                let mut gv = Tensor::zeros(vv.shape());
                kernels::attention_backward(
                    geom,
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    gd,
                    gq.data_mut(),
                    gk.data_mut(),
                    gv.data_mut(),
                );
                for (var, part) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(t) = self.acc(grads, var) {
                        t.add_assign(&part);
                    }
                }
            }
            Op::SeqConv { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut gx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut gw = self.needs(*w).then(|| Tensor::zeros(wv.shape()));
                let mut gb = self.needs(*b).then(|| Tensor::zeros(self.value(*b).shape()));
                kernels::seq_conv_backward(
                    geom,
                    xv.data(),
                    wv.data(),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (var, part) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(part) = part {
                        if let Some(t) = self.acc(grads, var) {
                            t.add_assign(&part);
                        }
                    }
                }
            }
            Op::SegmentMean { x, seg } => {
                let d = node.value.last_dim();
                let inv = T::one() / real::<T>(*seg as f64);
                if let Some(t) = self.acc(grads, *x) {
                    for (r, row) in t.data_mut().chunks_mut(d).enumerate() {
                        let src = &gd[(r / seg) * d..(r / seg + 1) * d];
                        row.iter_mut().zip(src).for_each(|(o, &y)| *o += y * inv);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let stride = node.value.len() / index.len().max(1);
                if let Some(t) = self.acc(grads, *x) {
                    for (k, &src) in index.iter().enumerate() {
                        let dst = &mut t.data_mut()[src * stride..(src + 1) * stride];
                        dst.iter_mut().zip(&gd[k * stride..(k + 1) * stride]).for_each(|(o, &y)| *o += y);
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                let stride = node.value.len() / factors.len().max(1);
                if let Some(t) = self.acc(grads, *x) {
                    for ((row, src), &f) in t.data_mut().chunks_mut(stride.max(1)).zip(gd.chunks(stride.max(1))).zip(factors) {
                        row.iter_mut().zip(src).for_each(|(o, &y)| *o += y * f);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(t) = self.acc(grads, p) {
                        t.data_mut().iter_mut().zip(&gd[offset..offset + len]).for_each(|(o, &y)| *o += y);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    if let Some(t) = self.acc(grads, p) {
                        for (r, row) in t.data_mut().chunks_mut(c).enumerate() {
                            let src = &gd[r * total + col..r * total + col + c];
                            row.iter_mut().zip(src).for_each(|(o, &y)| *o += y);
                        }
                    }
                    col += c;
                }
            }
            Op::CosinePairs { a, b, pairs, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.last_dim();
                let mut ga = self.needs(*a).then(|| Tensor::zeros(av.shape()));
                let mut gb = self.needs(*b).then(|| Tensor::zeros(bv.shape()));
                for (&(i, j), &y) in pairs.iter().zip(gd) {
                    let (x1, x2) = (av.row(i), bv.row(j));
                    let (d1, d2) = cosine_grad(x1, x2, *eps);
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga.data_mut()[i * d..(i + 1) * d];
                        dst.iter_mut().zip(&d1).for_each(|(o, &v)| *o += y * v);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb.data_mut()[j * d..(j + 1) * d];
                        dst.iter_mut().zip(&d2).for_each(|(o, &v)| *o += y * v);
                    }
                }
                for (var, part) in [(*a, ga), (*b, gb)] {
                    if let Some(part) = part {
                        if let Some(t) = self.acc(grads, var) {
                            t.add_assign(&part);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).last_dim();
                let scale = gd[0] / real::<T>(targets.len() as f64);
                if let Some(t) = self.acc(grads, *logits) {
                    for (r, &tg) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == tg { T::one() } else { T::zero() };
                            t.data_mut()[r * c + j] += scale * (probs[r * c + j] - ind);
                        }
                    }
                }
            }
            Op::NllProbs { probs, labels, clamp } => {
                let pv = self.value(*probs);
                let c = pv.last_dim();
                let scale = gd[0] / real::<T>(labels.len() as f64);
                if let Some(t) = self.acc(grads, *probs) {
                    for (r, &l) in labels.iter().enumerate() {
                        let p = pv.data()[r * c + l];
                        if p > *clamp {
                            t.data_mut()[r * c + l] -= scale / p;
                        }
                    }
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let d = pv.last_dim();
                let scale = real::<T>(2.0) * gd[0] / real::<T>((rows.len() * d) as f64);
                for (var, sign) in [(*pred, T::one()), (*target, -T::one())] {
                    if let Some(t) = self.acc(grads, var) {
                        for &r in rows {
                            for k in r * d..(r + 1) * d {
                                t.data_mut()[k] += sign * scale * (pv.data()[k] - tv.data()[k]);
                            }
                        }
                    }
                }
            }
            Op::Pick { x, index } => {
                if let Some(t) = self.acc(grads, *x) {
                    t.data_mut()[*index] += gd[0];
                }
            }
        }
    }
}

/// `a·b / max(‖a‖‖b‖, eps)`.
pub fn cosine<T: Real>(a: &[T], b: &[T], eps: T) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    dot / (na * nb).max(eps)
}

fn cosine_grad<T: Real>(a: &[T], b: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na2 = a.iter().map(|&x| x * x).sum::<T>();
    let nb2 = b.iter().map(|&x| x * x).sum::<T>();
    let denom = na2.sqrt() * nb2.sqrt();
    if denom > eps {
        let s = dot / denom;
        let da = a.iter().zip(b).map(|(&x, &y)| y / denom - s * x / na2).collect();
        let db = a.iter().zip(b).map(|(&x, &y)| x / denom - s * y / nb2).collect();
        (da, db)
    } else {
        (b.iter().map(|&y| y / eps).collect(), a.iter().map(|&x| x / eps).collect())
    }
}
