use rand::seq::SliceRandom;
use rand::Rng;

use super::Video;
use crate::error::{Error, Result};

/// `n` consecutive frames (`n × C × H × W`) cut from one source video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<f32>,
    pub source_id: String,
    pub offset: usize,
}

impl FrameClip {
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

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

/// Bilinear resize of `count` planar frames from `h × w` to `oh × ow`
/// (pixel-center aligned). Same size returns the input unchanged.
pub fn resize_frames(frames: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return frames.to_vec();
    }
    let mut out = vec![0f32; planes * oh * ow];
    let coord = |o: usize, size_in: usize, size_out: usize| {
        let src = ((o as f64 + 0.5) * size_in as f64 / size_out as f64 - 0.5).clamp(0.0, (size_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(size_in - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    let ys: Vec<_> = (0..oh).map(|y| coord(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| coord(x, w, ow)).collect();
    for p in 0..planes {
        let src = &frames[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Contiguous `n` frames from a uniformly random valid offset, resized to `size × size`.
pub fn sample_clip<R: Rng + ?Sized>(
    video: &Video,
    source_id: &str,
    n: usize,
    size: usize,
    rng: &mut R,
) -> Result<FrameClip> {
    if n < 2 {
        return Err(Error::Validation(format!("clip length must be at least 2, got {n}")));
    }
    if video.t < n {
        return Err(Error::Validation(format!(
            "video `{source_id}` has {} frames, clip needs {n}",
            video.t
        )));
    }
    let offset = rng.random_range(0..=video.t - n);
    clip_at(video, source_id, offset, n, size)
}

/// Deterministic variant of [`sample_clip`] with an explicit offset.
pub fn clip_at(video: &Video, source_id: &str, offset: usize, n: usize, size: usize) -> Result<FrameClip> {
    if offset + n > video.t {
        return Err(Error::Validation(format!(
            "clip [{offset}, {}) exceeds video length {}",
            offset + n,
            video.t
        )));
    }
    let len = video.frame_len();
    let raw = &video.frames[offset * len..(offset + n) * len];
    Ok(FrameClip {
        n,
        c: video.c,
        h: size,
        w: size,
        frames: resize_frames(raw, n * video.c, video.h, video.w, size, size),
        source_id: source_id.to_string(),
        offset,
    })
}

/// Uniform draw from the non-identity permutations of `0..n`.
pub fn shuffle_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Validation(format!("cannot shuffle {n} element(s) into a different order")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// `out[i] = items[perm[i]]` for contiguous chunks of `chunk` elements.
pub fn apply_permutation<T: Copy>(items: &[T], chunk: usize, perm: &[usize]) -> Vec<T> {
    assert_eq!(items.len(), chunk * perm.len(), "permutation length does not match data");
    let mut out = Vec::with_capacity(items.len());
    for &p in perm {
        out.extend_from_slice(&items[p * chunk..(p + 1) * chunk]);
    }
    out
}

/// Reorders the clip's frames with a random non-identity permutation.
pub fn shuffle_clip<R: Rng + ?Sized>(clip: &FrameClip, rng: &mut R) -> Result<(FrameClip, Vec<usize>)> {
    let perm = shuffle_permutation(clip.n, rng)?;
    let frames = apply_permutation(&clip.frames, clip.frame_len(), &perm);
    Ok((FrameClip { frames, ..clip.clone() }, perm))
}
