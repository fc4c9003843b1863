//! Forward and backward kernels on flat row-major buffers.
//!
//! The tape in [`super::tape`] owns shapes and bookkeeping; everything here
//! assumes the caller already validated extents.

use super::real::{real, Real};
use crate::error::{Error, Result};

/// Geometry of a batched 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// `input` is `[N, C, H, W]` or `[C, H, W]`; `kernel` is `[C_out, C_in, kH, kW]`.
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Self> {
        let (batch, c_in, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be 3-D or 4-D, got {input:?}"))),
        };
        let [c_out, kc, kh, kw] = *kernel else {
            return Err(Error::dim(format!("conv2d kernel must be 4-D, got {kernel:?}")));
        };
        if kc != c_in {
            return Err(Error::dim(format!("conv2d kernel expects {kc} channels, input has {c_in}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (ph, pw) = (h + 2 * pad_h, w + 2 * pad_w);
        if kh > ph || kw > pw || kh == 0 || kw == 0 {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn image_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn output_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.ho, self.wo]
        } else {
            vec![self.c_out, self.ho, self.wo]
        }
    }

    /// Input pixel offset (within one image) feeding patch row `r` at output position `p`.
    #[inline]
    fn source(&self, r: usize, p: usize) -> Option<usize> {
        let c = r / (self.kh * self.kw);
        let ky = (r / self.kw) % self.kh;
        let kx = r % self.kw;
        let oy = p / self.wo;
        let ox = p % self.wo;
        let y = (oy * self.stride + ky).checked_sub(self.pad_h)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_w)?;
        (y < self.h && x < self.w).then(|| (c * self.h + y) * self.w + x)
    }
}

fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let positions = g.positions();
    for r in 0..g.patch_len() {
        let row = &mut cols[r * positions..(r + 1) * positions];
        for (p, slot) in row.iter_mut().enumerate() {
            *slot = match g.source(r, p) {
                Some(i) => img[i],
                None => T::zero(),
            };
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let positions = g.positions();
    for r in 0..g.patch_len() {
        let row = &cols[r * positions..(r + 1) * positions];
        for (p, &v) in row.iter().enumerate() {
            if let Some(i) = g.source(r, p) {
                img[i] += v;
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (pl, pos) = (g.patch_len(), g.positions());
    let out_len = g.c_out * pos;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = vec![T::zero(); pl * pos];
    for n in 0..g.batch {
        im2col(g, &x[n * g.image_len()..(n + 1) * g.image_len()], &mut cols);
        let o = &mut out[n * out_len..(n + 1) * out_len];
        T::gemm(g.c_out, pl, pos, T::one(), kernel, (pl, 1), &cols, (pos, 1), T::zero(), o, (pos, 1));
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(pos).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

/// Accumulates gradients into whichever of `gx`, `gk`, `gb` are provided.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (pl, pos) = (g.patch_len(), g.positions());
    let out_len = g.c_out * pos;
    let mut cols = vec![T::zero(); pl * pos];
    for n in 0..g.batch {
        let go = &gout[n * out_len..(n + 1) * out_len];
        if let Some(gb) = gb.as_deref_mut() {
            for (co, chunk) in go.chunks(pos).enumerate() {
                gb[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gk) = gk.as_deref_mut() {
            im2col(g, &x[n * g.image_len()..(n + 1) * g.image_len()], &mut cols);
            // gk[Co, PL] += go[Co, P] · cols[PL, P]^T
            T::gemm(g.c_out, pos, pl, T::one(), go, (pos, 1), &cols, (1, pos), T::one(), gk, (pl, 1));
        }
        if let Some(gx) = gx.as_deref_mut() {
            // cols[PL, P] = kernel[Co, PL]^T · go[Co, P]
            T::gemm(pl, g.c_out, pos, T::one(), kernel, (1, pl), go, (pos, 1), T::zero(), &mut cols, (pos, 1));
            col2im(g, &cols, &mut gx[n * g.image_len()..(n + 1) * g.image_len()]);
        }
    }
}

/// Non-overlapping mean pooling over the last two axes.
pub fn avg_pool2d_forward<T: Real>(x: &[T], h: usize, w: usize, window: usize) -> Vec<T> {
    let (ho, wo) = (h / window, w / window);
    let planes = x.len() / (h * w);
    let scale = T::one() / real::<T>((window * window) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            let oy = y / window;
            for xx in 0..w {
                dst[oy * wo + xx / window] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub fn avg_pool2d_backward<T: Real>(gout: &[T], gx: &mut [T], h: usize, w: usize, window: usize) {
    let (ho, wo) = (h / window, w / window);
    let planes = gx.len() / (h * w);
    let scale = T::one() / real::<T>((window * window) as f64);
    for p in 0..planes {
        let src = &gout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] += src[(y / window) * wo + xx / window] * scale;
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact Gaussian-error linear unit, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half: T = real(0.5);
    half * x * (T::one() + (x * real::<T>(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half: T = real(0.5);
    let cdf = half * (T::one() + (x * real::<T>(FRAC_1_SQRT_2)).erf());
    let pdf = real::<T>(INV_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

/// Row-wise softmax over contiguous rows of length `d`, max-subtracted.
pub fn softmax_rows<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Given softmax output `y` and upstream `gy`, accumulates `gx = y ⊙ (gy − Σ gy·y)`.
pub fn softmax_rows_backward<T: Real>(y: &[T], gy: &[T], gx: &mut [T], d: usize) {
    for ((yr, gr), xr) in y.chunks(d).zip(gy.chunks(d)).zip(gx.chunks_mut(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((x, &yv), &gv) in xr.iter_mut().zip(yr).zip(gr) {
            *x += yv * (gv - dot);
        }
    }
}

/// Returns `(y, xhat, inv_std)` for layer normalization over rows of length `d`.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let inv_d = T::one() / real::<T>(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for i in 0..d {
            let h = (xr[i] - mean) * is;
            xhat[r * d + i] = h;
            y[r * d + i] = gamma[i] * h + beta[i];
        }
    }
    (y, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    gy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    d: usize,
    mut gx: Option<&mut [T]>,
    mut ggamma: Option<&mut [T]>,
    mut gbeta: Option<&mut [T]>,
) {
    let inv_d = T::one() / real::<T>(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &is) in inv_std.iter().enumerate() {
        let g = &gy[r * d..(r + 1) * d];
        let h = &xhat[r * d..(r + 1) * d];
        if let Some(gg) = ggamma.as_deref_mut() {
            for i in 0..d {
                gg[i] += g[i] * h[i];
            }
        }
        if let Some(gbt) = gbeta.as_deref_mut() {
            for i in 0..d {
                gbt[i] += g[i];
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let mut mean_d = T::zero();
            let mut mean_dh = T::zero();
            for i in 0..d {
                dxhat[i] = g[i] * gamma[i];
                mean_d += dxhat[i];
                mean_dh += dxhat[i] * h[i];
            }
            mean_d *= inv_d;
            mean_dh *= inv_d;
            let out = &mut gx[r * d..(r + 1) * d];
            for i in 0..d {
                out[i] += is * (dxhat[i] - mean_d - h[i] * mean_dh);
            }
        }
    }
}

/// Layout of multi-head attention over `groups` independent sequences of `seq` rows.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub groups: usize,
    pub seq: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale<T: Real>(&self) -> T {
        T::one() / real::<T>(self.head_dim() as f64).sqrt()
    }
}

/// Scaled dot-product attention per (group, head). Returns `(out, probs)` where
/// `probs` is `[groups, heads, seq, seq]`.
pub fn attention_forward<T: Real>(g: &AttnGeom, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let (s, d, dh) = (g.seq, g.dim, g.head_dim());
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); g.groups * g.heads * s * s];
    let scale = g.scale::<T>();
    for b in 0..g.groups {
        for h in 0..g.heads {
            let off = b * s * d + h * dh;
            let p = &mut probs[(b * g.heads + h) * s * s..(b * g.heads + h + 1) * s * s];
            // P = Q K^T * scale
            T::gemm(s, dh, s, scale, &q[off..], (d, 1), &k[off..], (1, d), T::zero(), p, (s, 1));
            for row in p.chunks_mut(s) {
                softmax_in_place(row);
            }
            T::gemm(s, s, dh, T::one(), p, (s, 1), &v[off..], (d, 1), T::zero(), &mut out[off..], (d, 1));
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    let (s, d, dh) = (g.seq, g.dim, g.head_dim());
    let scale = g.scale::<T>();
    let mut dp = vec![T::zero(); s * s];
    let mut ds = vec![T::zero(); s * s];
    for b in 0..g.groups {
        for h in 0..g.heads {
            let off = b * s * d + h * dh;
            let p = &probs[(b * g.heads + h) * s * s..(b * g.heads + h + 1) * s * s];
            // dV += P^T dO
            T::gemm(s, s, dh, T::one(), p, (1, s), &gout[off..], (d, 1), T::one(), &mut gv[off..], (d, 1));
            // dP = dO V^T
            T::gemm(s, dh, s, T::one(), &gout[off..], (d, 1), &v[off..], (1, d), T::zero(), &mut dp, (s, 1));
            ds.iter_mut().for_each(|x| *x = T::zero());
            softmax_rows_backward(p, &dp, &mut ds, s);
            // dQ += dS K * scale ; dK += dS^T Q * scale
            T::gemm(s, s, dh, scale, &ds, (s, 1), &k[off..], (d, 1), T::one(), &mut gq[off..], (d, 1));
            T::gemm(s, s, dh, scale, &ds, (1, s), &q[off..], (d, 1), T::one(), &mut gk[off..], (d, 1));
        }
    }
}

/// Layout of a 1×k convolution along the row (token) axis of `[groups·seq, c_in]`.
#[derive(Clone, Copy, Debug)]
pub struct SeqConvGeom {
    pub rows: usize,
    pub seq: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub taps: usize,
}

impl SeqConvGeom {
    fn width(&self) -> usize {
        self.c_in * self.taps
    }

    /// Source row for output row `r` and tap `t`, zero-padded at sequence edges.
    #[inline]
    fn source(&self, r: usize, t: usize) -> Option<usize> {
        let pad = self.taps / 2;
        let pos = r % self.seq;
        let src = (pos + t).checked_sub(pad)?;
        (src < self.seq).then(|| r - pos + src)
    }

    fn unfold<T: Real>(&self, x: &[T]) -> Vec<T> {
        let wdt = self.width();
        let mut cols = vec![T::zero(); self.rows * wdt];
        for r in 0..self.rows {
            for t in 0..self.taps {
                if let Some(src) = self.source(r, t) {
                    let xs = &x[src * self.c_in..(src + 1) * self.c_in];
                    for (c, &v) in xs.iter().enumerate() {
                        cols[r * wdt + c * self.taps + t] = v;
                    }
                }
            }
        }
        cols
    }
}

/// Kernel layout is `[c_out, c_in, 1, taps]`, i.e. `[c_out, c_in·taps]` row-major.
pub fn seq_conv_forward<T: Real>(g: &SeqConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let cols = g.unfold(x);
    let wdt = g.width();
    let mut out = vec![T::zero(); g.rows * g.c_out];
    for row in out.chunks_mut(g.c_out) {
        row.copy_from_slice(b);
    }
    T::gemm(g.rows, wdt, g.c_out, T::one(), &cols, (wdt, 1), w, (1, wdt), T::one(), &mut out, (g.c_out, 1));
    out
}

pub fn seq_conv_backward<T: Real>(
    g: &SeqConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let wdt = g.width();
    if let Some(gb) = gb {
        for row in gout.chunks(g.c_out) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    if let Some(gw) = gw {
        let cols = g.unfold(x);
        // gw[Co, W] += gout[R, Co]^T · cols[R, W]
        T::gemm(g.c_out, g.rows, wdt, T::one(), gout, (1, g.c_out), &cols, (wdt, 1), T::one(), gw, (wdt, 1));
    }
    if let Some(gx) = gx {
        let mut gcols = vec![T::zero(); g.rows * wdt];
        T::gemm(g.rows, g.c_out, wdt, T::one(), gout, (g.c_out, 1), w, (wdt, 1), T::zero(), &mut gcols, (wdt, 1));
        for r in 0..g.rows {
            for t in 0..g.taps {
                if let Some(src) = g.source(r, t) {
                    for c in 0..g.c_in {
                        gx[src * g.c_in + c] += gcols[r * wdt + c * g.taps + t];
                    }
                }
            }
        }
    }
}
