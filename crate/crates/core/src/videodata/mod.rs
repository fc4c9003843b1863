//! Synthetic video corpora, clip sampling, frame shuffling, perturbations and manifests.

mod clip;
mod corpus;
mod manifest;
mod perturb;
mod storage;
mod synth;

use serde::{Deserialize, Serialize};

pub use clip::{apply_permutation, clip_at, resize_frames, sample_clip, shuffle_clip, shuffle_permutation, FrameClip};
pub use corpus::{generate_corpus, load_corpus, save_corpus, Corpus, CorpusConfig, CorpusEntry};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestEntry};
pub use perturb::{apply_perturbation, PerturbationKind, PerturbationSpec, SeveritySchedule};
pub use storage::{read_video, write_video, VideoHeader};
pub use synth::{
    generate_fake_video, generate_real_video, max_mean_abs_delta, mean_abs_deltas, render_frame, Dynamics,
    DynamicsConfig, SyntheticVideo,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index used by the detector head: real = 0, fake = 1.
    pub fn class(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForgeryKind {
    None,
    TemporalJitter,
    PerFrameResample,
    RegionSplice,
    BlendBoundary,
}

impl ForgeryKind {
    pub const FAKES: [ForgeryKind; 4] = [
        ForgeryKind::TemporalJitter,
        ForgeryKind::PerFrameResample,
        ForgeryKind::RegionSplice,
        ForgeryKind::BlendBoundary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForgeryKind::None => "none",
            ForgeryKind::TemporalJitter => "temporal-jitter",
            ForgeryKind::PerFrameResample => "per-frame-resample",
            ForgeryKind::RegionSplice => "region-splice",
            ForgeryKind::BlendBoundary => "blend-boundary",
        }
    }
}

impl std::str::FromStr for ForgeryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ForgeryKind::None]
            .into_iter()
            .chain(ForgeryKind::FAKES)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown forgery kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

/// Frame-major `T × C × H × W` array of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<f32>,
}

impl Video {
    pub fn new(t: usize, c: usize, h: usize, w: usize, frames: Vec<f32>) -> Result<Self> {
        if t == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!("invalid video extents {t}x{c}x{h}x{w}")));
        }
        if frames.len() != t * c * h * w {
            return Err(Error::dim(format!(
                "video {t}x{c}x{h}x{w} needs {} values, got {}",
                t * c * h * w,
                frames.len()
            )));
        }
        Ok(Self { t, c, h, w, frames })
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.frames[i * n..(i + 1) * n]
    }

    pub fn in_unit_range(&self) -> bool {
        self.frames.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// The whole video as one clip starting at frame 0.
    pub fn as_clip(&self, source_id: &str) -> FrameClip {
        FrameClip {
            n: self.t,
            c: self.c,
            h: self.h,
            w: self.w,
            frames: self.frames.clone(),
            source_id: source_id.to_string(),
            offset: 0,
        }
    }
}

#[cfg(test)]
mod tests;
