use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FrameClip;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Saturation,
    Contrast,
    Block,
    Noise,
    Blur,
    Pixelation,
    Compression,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 7] = [
        PerturbationKind::Saturation,
        PerturbationKind::Contrast,
        PerturbationKind::Block,
        PerturbationKind::Noise,
        PerturbationKind::Blur,
        PerturbationKind::Pixelation,
        PerturbationKind::Compression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Saturation => "saturation",
            PerturbationKind::Contrast => "contrast",
            PerturbationKind::Block => "block",
            PerturbationKind::Noise => "noise",
            PerturbationKind::Blur => "blur",
            PerturbationKind::Pixelation => "pixelation",
            PerturbationKind::Compression => "compression",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// 1 (mildest) through 5.
    pub severity: u8,
    pub seed: u64,
}

/// Per-kind parameters indexed by severity − 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeveritySchedule {
    /// Chroma scale: 1 keeps colors, 0 is grayscale.
    pub saturation: [f64; 5],
    /// Scale of deviations from the per-frame mean.
    pub contrast: [f64; 5],
    /// Number of gray squares, each with side `block_side × frame side`.
    pub block: [usize; 5],
    pub block_side: f64,
    /// Gaussian noise standard deviation.
    pub noise: [f64; 5],
    /// Gaussian blur standard deviation in pixels.
    pub blur: [f64; 5],
    /// Downsampling factor.
    pub pixelation: [usize; 5],
    /// Block-DCT quality, 1 to 100.
    pub compression: [u32; 5],
}

impl Default for SeveritySchedule {
    fn default() -> Self {
        Self {
            saturation: [0.4, 0.3, 0.2, 0.1, 0.0],
            contrast: [0.85, 0.725, 0.6, 0.475, 0.35],
            block: [16, 32, 48, 64, 80],
            block_side: 16.0 / 224.0,
            noise: [0.01, 0.02, 0.05, 0.1, 0.15],
            blur: [0.5, 0.75, 1.0, 1.5, 2.0],
            pixelation: [2, 3, 4, 5, 6],
            compression: [80, 60, 40, 20, 10],
        }
    }
}

impl SeveritySchedule {
    /// A schedule whose every entry leaves a clip unchanged.
    pub fn identity() -> Self {
        Self {
            saturation: [1.0; 5],
            contrast: [1.0; 5],
            block: [0; 5],
            block_side: 16.0 / 224.0,
            noise: [0.0; 5],
            blur: [0.0; 5],
            pixelation: [1; 5],
            compression: [100; 5],
        }
    }

    /// The schedule parameter for one kind and severity, as recorded in reports.
    pub fn parameter(&self, kind: PerturbationKind, severity: u8) -> Result<f64> {
        let i = severity_index(severity)?;
        Ok(match kind {
            PerturbationKind::Saturation => self.saturation[i],
            PerturbationKind::Contrast => self.contrast[i],
            PerturbationKind::Block => self.block[i] as f64,
            PerturbationKind::Noise => self.noise[i],
            PerturbationKind::Blur => self.blur[i],
            PerturbationKind::Pixelation => self.pixelation[i] as f64,
            PerturbationKind::Compression => self.compression[i] as f64,
        })
    }
}

fn severity_index(severity: u8) -> Result<usize> {
    if (1..=5).contains(&severity) {
        Ok(severity as usize - 1)
    } else {
        Err(Error::Validation(format!("severity must be in 1..=5, got {severity}")))
    }
}

/// Applies one perturbation to every frame. Output keeps the clip's shape and stays in `[0, 1]`.
pub fn apply_perturbation(clip: &FrameClip, spec: &PerturbationSpec, schedule: &SeveritySchedule) -> Result<FrameClip> {
    let i = severity_index(spec.severity)?;
    let mut out = clip.clone();
    let (c, h, w) = (clip.c, clip.h, clip.w);
    let mut rng = seeded(spec.seed);
    match spec.kind {
        PerturbationKind::Saturation => {
            if c != 3 {
                return Err(Error::Validation("saturation needs three color channels".into()));
            }
            let s = schedule.saturation[i] as f32;
            for f in (0..clip.n).filter(|_| s != 1.0) {
                let frame = out.frame_mut(f);
                let plane = h * w;
                for p in 0..plane {
                    let gray = 0.299 * frame[p] + 0.587 * frame[plane + p] + 0.114 * frame[2 * plane + p];
                    for ch in 0..3 {
                        let v = &mut frame[ch * plane + p];
                        *v = gray + (*v - gray) * s;
                    }
                }
            }
        }
        PerturbationKind::Contrast => {
            let k = schedule.contrast[i] as f32;
            for f in (0..clip.n).filter(|_| k != 1.0) {
                let frame = out.frame_mut(f);
                let mean = frame.iter().sum::<f32>() / frame.len() as f32;
                frame.iter_mut().for_each(|v| *v = mean + (*v - mean) * k);
            }
        }
        PerturbationKind::Block => {
            let side = ((h.min(w) as f64 * schedule.block_side).round() as usize).clamp(1, h.min(w));
            let blocks: Vec<(usize, usize, f32)> = (0..schedule.block[i])
                .map(|_| (rng.random_range(0..=h - side), rng.random_range(0..=w - side), rng.random::<f32>()))
                .collect();
            for f in 0..clip.n {
                let frame = out.frame_mut(f);
                for &(y0, x0, gray) in &blocks {
                    for ch in 0..c {
                        for y in y0..y0 + side {
                            frame[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + side].fill(gray);
                        }
                    }
                }
            }
        }
        PerturbationKind::Noise => {
            let sigma = schedule.noise[i];
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::Validation(e.to_string()))?;
                out.frames.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
            }
        }
        PerturbationKind::Blur => {
            let sigma = schedule.blur[i];
            if sigma > 0.0 {
                let kernel = gaussian_kernel(sigma);
                for plane in out.frames.chunks_mut(h * w) {
                    blur_plane(plane, h, w, &kernel);
                }
            }
        }
        PerturbationKind::Pixelation => {
            let factor = schedule.pixelation[i];
            if factor == 0 {
                return Err(Error::Validation("pixelation factor must be positive".into()));
            }
            if factor > 1 {
                for plane in out.frames.chunks_mut(h * w) {
                    pixelate_plane(plane, h, w, factor);
                }
            }
        }
        PerturbationKind::Compression => {
            let quality = schedule.compression[i];
            if !(1..=100).contains(&quality) {
                return Err(Error::Validation(format!("compression quality must be in 1..=100, got {quality}")));
            }
            if quality < 100 {
                let table = quant_table(quality);
                for plane in out.frames.chunks_mut(h * w) {
                    dct_quantize_plane(plane, h, w, &table);
                }
            }
        }
    }
    out.frames.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable blur with edge replication.
fn blur_plane(plane: &mut [f32], h: usize, w: usize, kernel: &[f32]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * plane[y * w + (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * tmp[(y as isize + k as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
}

/// Block averages over `factor × factor` cells (partial cells at the edges), upsampled by replication.
fn pixelate_plane(plane: &mut [f32], h: usize, w: usize, factor: usize) {
    for by in (0..h).step_by(factor) {
        for bx in (0..w).step_by(factor) {
            let (ey, ex) = ((by + factor).min(h), (bx + factor).min(w));
            let mut sum = 0.0;
            for y in by..ey {
                sum += plane[y * w + bx..y * w + ex].iter().sum::<f32>();
            }
            let mean = sum / ((ey - by) * (ex - bx)) as f32;
            for y in by..ey {
                plane[y * w + bx..y * w + ex].fill(mean);
            }
        }
    }
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104.,
    113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Standard luminance table scaled by quality, in units of `[0, 1]` pixel values.
fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for (o, &base) in out.iter_mut().zip(&LUMA_TABLE) {
        *o = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0) / 255.0;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// 8×8 orthonormal DCT, coefficient quantization, inverse DCT. Edge blocks are
/// padded by replication and only the in-frame part is written back.
fn dct_quantize_plane(plane: &mut [f32], h: usize, w: usize, table: &[f64; 64]) {
    let m = dct_basis();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0f64; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = plane[(by + y).min(h - 1) * w + (bx + x).min(w - 1)] as f64 - 0.5;
                }
            }
            let mut tmp = [[0.0; 8]; 8];
            for u in 0..8 {
                for x in 0..8 {
                    tmp[u][x] = (0..8).map(|y| m[u][y] * block[y][x]).sum();
                }
            }
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let c: f64 = (0..8).map(|x| tmp[u][x] * m[v][x]).sum();
                    let q = table[u * 8 + v];
                    coef[u][v] = (c / q).round() * q;
                }
            }
            for y in 0..8 {
                for v in 0..8 {
                    tmp[y][v] = (0..8).map(|u| m[u][y] * coef[u][v]).sum();
                }
            }
            for y in 0..8.min(h - by) {
                for x in 0..8.min(w - bx) {
                    let val: f64 = (0..8).map(|v| tmp[y][v] * m[v][x]).sum();
                    plane[(by + y) * w + bx + x] = (val + 0.5) as f32;
                }
            }
        }
    }
}
