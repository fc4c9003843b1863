use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{embed_tokens, encode_frames, frames_tensor, pool_representation, transformer_forward, ModelConfig};
use crate::detector::head_logits;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape};
use crate::ssl::decode_features;
use crate::videodata::{FrameClip, Rect};

/// Which vectors weight the last convolution's channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamSource {
    /// Spatially pooled gradients of the fake logit.
    Encoder,
    /// The decoder's predicted feature vector for each frame.
    Decoder,
}

/// Per-frame saliency, normalized so the clip maximum is 1 (or all zero).
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn frame(&self, i: usize) -> &[f32] {
        &self.values[i * self.h * self.w..(i + 1) * self.h * self.w]
    }

    /// Saliency at full-resolution pixel `(y, x)` of an `fh × fw` frame.
    fn at(&self, i: usize, y: usize, x: usize, fh: usize, fw: usize) -> f32 {
        self.frame(i)[(y * self.h / fh) * self.w + x * self.w / fw]
    }

    /// Mean saliency inside and outside `rect`, over all frames, at frame resolution.
    pub fn inside_outside(&self, rect: &Rect, fh: usize, fw: usize) -> (f64, f64) {
        let (mut inside, mut outside, mut ni, mut no) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..self.frames {
            for y in 0..fh {
                for x in 0..fw {
                    let v = self.at(i, y, x, fh, fw) as f64;
                    if rect.contains(y, x) {
                        inside += v;
                        ni += 1;
                    } else {
                        outside += v;
                        no += 1;
                    }
                }
            }
        }
        (inside / ni.max(1) as f64, outside / no.max(1) as f64)
    }
}

/// Class-activation maps over the encoder's last convolution for the fake class.
/// A zero gradient yields an all-zero heatmap.
pub fn grad_cam(clip: &FrameClip, params: &ParamStore<f32>, model: &ModelConfig, source: CamSource) -> Result<Heatmap> {
    let n = clip.n;
    let mut tape = Tape::new();
    let bound = params.bind_all(&mut tape);
    let frames = tape.constant(frames_tensor(&[clip])?);
    let enc = encode_frames(&mut tape, &bound, frames)?;
    let z0 = embed_tokens(&mut tape, &bound, model, enc.features, n)?;
    let tokens = transformer_forward(&mut tape, &bound, model, z0, n)?;
    let shape = tape.shape(enc.maps).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let weights: Vec<f32> = match source {
        CamSource::Encoder => {
            let pooled = pool_representation(&mut tape, tokens, n)?;
            let logits = head_logits(&mut tape, &bound, pooled)?;
            let fake = tape.pick(logits, 1)?;
            let grads = tape.backward(fake)?;
            match grads.get(enc.maps) {
                Some(g) => g.data().chunks(plane).map(|p| p.iter().sum::<f32>() / plane as f32).collect(),
                None => vec![0.0; n * c],
            }
        }
        CamSource::Decoder => {
            let predicted = decode_features(&mut tape, &bound, tokens, n)?;
            let p = tape.value(predicted);
            if p.last_dim() != c {
                return Err(Error::dim(format!("decoder predicts {} channels, maps have {c}", p.last_dim())));
            }
            p.data().to_vec()
        }
    };
    let maps = tape.value(enc.maps).data();
    let mut values = vec![0f32; n * plane];
    for f in 0..n {
        let dst = &mut values[f * plane..(f + 1) * plane];
        for ch in 0..c {
            let wgt = weights[f * c + ch];
            let src = &maps[(f * c + ch) * plane..(f * c + ch + 1) * plane];
            for (d, &a) in dst.iter_mut().zip(src) {
                *d += wgt * a;
            }
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = values.iter().copied().fold(0f32, f32::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap { frames: n, h, w, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapIndex {
    pub video_id: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub source: CamSource,
    pub files: Vec<String>,
    pub region: Option<Rect>,
}

/// Writes one binary PGM (maxval 255) per frame into `dir` and returns their index.
pub fn write_heatmap(dir: &Path, video_id: &str, heatmap: &Heatmap, source: CamSource, region: Option<Rect>) -> Result<HeatmapIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(heatmap.frames);
    for i in 0..heatmap.frames {
        let name = format!("{video_id}_{i:03}.pgm");
        let mut bytes = format!("P5\n{} {}\n255\n", heatmap.w, heatmap.h).into_bytes();
        bytes.extend(heatmap.frame(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    Ok(HeatmapIndex { video_id: video_id.to_string(), frames: heatmap.frames, width: heatmap.w, height: heatmap.h, source, files, region })
}
