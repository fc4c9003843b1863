use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ForgeryKind, Label, Rect, Video};
use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};

/// Ranges the generator draws per-video dynamics from. Spatial quantities are
/// fractions of the frame side; frequencies are radians per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub blobs: usize,
    pub radius: (f64, f64),
    pub radius_swing: f64,
    pub motion_amplitude: (f64, f64),
    pub motion_frequency: (f64, f64),
    pub color_swing: f64,
    pub color_frequency: (f64, f64),
    pub background_drift: f64,
    /// Upper bound on the mean absolute frame-to-frame pixel change of a real video.
    pub smoothness_bound: f64,
    /// Adjacent-pair swaps applied by the temporal-jitter forgery.
    pub jitter_swaps: usize,
    /// Side of the spliced or blended rectangle, as a fraction of the frame side.
    pub region_fraction: f64,
    /// Width of the noisy band around a blended rectangle, as a fraction of its side.
    pub blend_border: f64,
    /// Standard deviation of the per-pixel noise in that band.
    pub blend_noise: f64,
    /// Standard deviation of a per-frame brightness offset shared by the band.
    pub blend_flicker: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            blobs: 3,
            radius: (0.12, 0.2),
            radius_swing: 0.4,
            motion_amplitude: (0.12, 0.22),
            motion_frequency: (0.1, 0.2),
            color_swing: 0.35,
            color_frequency: (0.25, 0.4),
            background_drift: 0.03,
            smoothness_bound: 0.063,
            jitter_swaps: 6,
            region_fraction: 0.45,
            blend_border: 0.15,
            blend_noise: 0.2,
            blend_flicker: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub amplitude: [f64; 2],
    pub frequency: [f64; 2],
    pub phase: [f64; 2],
    pub radius: f64,
    pub radius_frequency: f64,
    pub radius_phase: f64,
    pub color: [f64; 3],
    pub color_frequency: f64,
    pub color_phase: [f64; 3],
    pub stripe_frequency: f64,
    pub stripe_angle: f64,
    pub stripe_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grating {
    pub wave: [f64; 2],
    pub phase: f64,
    pub color: [f64; 3],
}

/// Smooth trajectories and appearance curves that define one synthetic video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub background: [f64; 3],
    pub gratings: Vec<Grating>,
    pub drift: [f64; 2],
    pub blobs: Vec<Blob>,
    pub radius_swing: f64,
    pub color_swing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub video: Video,
    pub dynamics: Dynamics,
    pub label: Label,
    pub kind: ForgeryKind,
    /// Manipulated rectangle for region-based forgeries.
    pub region: Option<Rect>,
}

fn uniform(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample_dynamics(cfg: &DynamicsConfig, rng: &mut SeededRng) -> Dynamics {
    let background = [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
    let gratings = (0..2)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(1.0..3.0) * 2.0 * PI;
            Grating {
                wave: [freq * angle.cos(), freq * angle.sin()],
                phase: rng.random_range(0.0..2.0 * PI),
                color: [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)],
            }
        })
        .collect();
    let drift_angle = rng.random_range(0.0..2.0 * PI);
    let blobs = (0..cfg.blobs)
        .map(|_| {
            let amplitude = [uniform(rng, cfg.motion_amplitude), uniform(rng, cfg.motion_amplitude)];
            Blob {
                center: [
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.3..0.7),
                ],
                amplitude,
                frequency: [uniform(rng, cfg.motion_frequency), uniform(rng, cfg.motion_frequency)],
                phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
                radius: uniform(rng, cfg.radius),
                radius_frequency: uniform(rng, cfg.motion_frequency),
                radius_phase: rng.random_range(0.0..2.0 * PI),
                color: [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)],
                color_frequency: uniform(rng, cfg.color_frequency),
                color_phase: [
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                ],
                stripe_frequency: rng.random_range(2.0..4.0) * 2.0 * PI,
                stripe_angle: rng.random_range(0.0..PI),
                stripe_speed: uniform(rng, cfg.motion_frequency),
            }
        })
        .collect();
    Dynamics {
        background,
        gratings,
        drift: [cfg.background_drift * drift_angle.cos(), cfg.background_drift * drift_angle.sin()],
        blobs,
        radius_swing: cfg.radius_swing,
        color_swing: cfg.color_swing,
    }
}

/// Renders the scene at continuous time `time` into a `3 × h × w` frame.
pub fn render_frame(d: &Dynamics, time: f64, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; 3 * h * w];
    let blobs: Vec<_> = d
        .blobs
        .iter()
        .map(|b| {
            let cy = b.center[0] + b.amplitude[0] * (b.frequency[0] * time + b.phase[0]).sin();
            let cx = b.center[1] + b.amplitude[1] * (b.frequency[1] * time + b.phase[1]).sin();
            let r = b.radius * (1.0 + d.radius_swing * (b.radius_frequency * time + b.radius_phase).sin());
            let color: Vec<f64> = (0..3)
                .map(|c| b.color[c] + d.color_swing * (b.color_frequency * time + b.color_phase[c]).sin())
                .collect();
            (cy, cx, r, color, b)
        })
        .collect();
    for y in 0..h {
        let fy = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64;
            let (py, px) = (fy + d.drift[0] * time, fx + d.drift[1] * time);
            let mut px_val = d.background;
            for g in &d.gratings {
                let s = (g.wave[0] * py + g.wave[1] * px + g.phase).sin();
                for c in 0..3 {
                    px_val[c] += g.color[c] * s;
                }
            }
            for (cy, cx, r, color, b) in &blobs {
                let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                let alpha = (-d2 / (2.0 * r * r)).exp();
                if alpha < 1e-4 {
                    continue;
                }
                let (sa, ca) = b.stripe_angle.sin_cos();
                let u = (fy - cy) * sa + (fx - cx) * ca;
                let stripe = 0.12 * (b.stripe_frequency * u + b.stripe_speed * time).sin();
                for c in 0..3 {
                    px_val[c] = px_val[c] * (1.0 - alpha) + (color[c] + stripe) * alpha;
                }
            }
            for c in 0..3 {
                out[(c * h + y) * w + x] = px_val[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn render_video(d: &Dynamics, times: &[f64], h: usize, w: usize) -> Video {
    let mut frames = Vec::with_capacity(times.len() * 3 * h * w);
    for &t in times {
        frames.extend(render_frame(d, t, h, w));
    }
    Video { t: times.len(), c: 3, h, w, frames }
}

/// A temporally coherent video of smoothly moving, deforming, recoloring blobs
/// over a slowly drifting textured background.
pub fn generate_real_video(
    id: &str,
    seed: u64,
    t: usize,
    h: usize,
    w: usize,
    cfg: &DynamicsConfig,
) -> Result<SyntheticVideo> {
    if t < 2 || h < 4 || w < 4 {
        return Err(Error::dim(format!("invalid synthetic video extents T={t}, H={h}, W={w}")));
    }
    let mut rng = seeded(seed);
    let dynamics = sample_dynamics(cfg, &mut rng);
    let times: Vec<f64> = (0..t).map(|i| i as f64).collect();
    let video = render_video(&dynamics, &times, h, w);
    Ok(SyntheticVideo { id: id.to_string(), video, dynamics, label: Label::Real, kind: ForgeryKind::None, region: None })
}

fn region_around_blob(v: &SyntheticVideo, cfg: &DynamicsConfig, rng: &mut SeededRng) -> Rect {
    let (h, w) = (v.video.h, v.video.w);
    let rh = ((h as f64 * cfg.region_fraction).round() as usize).clamp(2, h);
    let rw = ((w as f64 * cfg.region_fraction).round() as usize).clamp(2, w);
    let blob = &v.dynamics.blobs[rng.random_range(0..v.dynamics.blobs.len().max(1))];
    let cy = (blob.center[0] * h as f64) as isize - rh as isize / 2;
    let cx = (blob.center[1] * w as f64) as isize - rw as isize / 2;
    Rect {
        y0: cy.clamp(0, (h - rh) as isize) as usize,
        x0: cx.clamp(0, (w - rw) as isize) as usize,
        h: rh,
        w: rw,
    }
}

/// Derives a forgery from a real video. Every kind keeps single frames plausible
/// while corrupting temporal coherence.
pub fn generate_fake_video(
    real: &SyntheticVideo,
    kind: ForgeryKind,
    seed: u64,
    cfg: &DynamicsConfig,
) -> Result<SyntheticVideo> {
    let mut rng = seeded(seed);
    let src = &real.video;
    let (t, h, w) = (src.t, src.h, src.w);
    let mut region = None;
    let video = match kind {
        ForgeryKind::None => {
            return Err(Error::Validation("a forgery needs a kind other than `none`".into()));
        }
        ForgeryKind::TemporalJitter => {
            if cfg.jitter_swaps == 0 {
                return Err(Error::Validation("temporal jitter needs at least one swap".into()));
            }
            // Disjoint adjacent pairs (i, i+1).
            let mut starts: Vec<usize> = (0..t / 2).map(|p| 2 * p + usize::from(t % 2 == 1 && rng.random())).collect();
            starts.retain(|&s| s + 1 < t);
            starts.shuffle(&mut rng);
            starts.truncate(cfg.jitter_swaps.max(1));
            let mut order: Vec<usize> = (0..t).collect();
            for s in starts {
                order.swap(s, s + 1);
            }
            let mut v = src.clone();
            for (i, &o) in order.iter().enumerate() {
                v.frame_mut(i).copy_from_slice(src.frame(o));
            }
            v
        }
        ForgeryKind::PerFrameResample => {
            let times: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..t as f64)).collect();
            render_video(&real.dynamics, &times, h, w)
        }
        ForgeryKind::RegionSplice => {
            let rect = region_around_blob(real, cfg, &mut rng);
            region = Some(rect);
            let mut v = src.clone();
            for i in 0..t {
                let donor = render_frame(&real.dynamics, rng.random_range(0.0..t as f64), h, w);
                let frame = v.frame_mut(i);
                for c in 0..3 {
                    for y in rect.y0..rect.y0 + rect.h {
                        for x in rect.x0..rect.x0 + rect.w {
                            let k = (c * h + y) * w + x;
                            frame[k] = donor[k];
                        }
                    }
                }
            }
            v
        }
        ForgeryKind::BlendBoundary => {
            let rect = region_around_blob(real, cfg, &mut rng);
            region = Some(rect);
            let border = ((rect.h.min(rect.w) as f64 * cfg.blend_border).round() as usize).max(1);
            let noise = Normal::new(0.0, cfg.blend_noise).map_err(|e| Error::Validation(e.to_string()))?;
            let flicker = Normal::new(0.0, cfg.blend_flicker).map_err(|e| Error::Validation(e.to_string()))?;
            let still = src.frame(0).to_vec();
            let mut v = src.clone();
            for i in 0..t {
                let offset = flicker.sample(&mut rng);
                let frame = v.frame_mut(i);
                for y in rect.y0..rect.y0 + rect.h {
                    for x in rect.x0..rect.x0 + rect.w {
                        let edge = y < rect.y0 + border
                            || y >= rect.y0 + rect.h - border
                            || x < rect.x0 + border
                            || x >= rect.x0 + rect.w - border;
                        for c in 0..3 {
                            let k = (c * h + y) * w + x;
                            let mut val = 0.5 * (still[k] as f64 + frame[k] as f64);
                            if edge {
                                val += offset + noise.sample(&mut rng);
                            }
                            frame[k] = val.clamp(0.0, 1.0) as f32;
                        }
                    }
                }
            }
            v
        }
    };
    Ok(SyntheticVideo {
        id: real.id.clone(),
        video,
        dynamics: real.dynamics.clone(),
        label: Label::Fake,
        kind,
        region,
    })
}

/// Mean absolute pixel change between each pair of consecutive frames.
pub fn mean_abs_deltas(v: &Video) -> Vec<f64> {
    (1..v.t)
        .map(|i| {
            let (a, b) = (v.frame(i - 1), v.frame(i));
            a.iter().zip(b).map(|(&p, &q)| (p - q).abs() as f64).sum::<f64>() / a.len() as f64
        })
        .collect()
}

pub fn max_mean_abs_delta(v: &Video) -> f64 {
    mean_abs_deltas(v).into_iter().fold(0.0, f64::max)
}
