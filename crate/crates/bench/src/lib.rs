//! Fixtures shared by the benchmarks.

use naco_core::config::{Profile, RunConfig};
use naco_core::numerics::Tensor;
use naco_core::videodata::{generate_real_video, CorpusEntry, ForgeryKind, Label, Split};

/// Deterministic values in `[-1, 1)` without pulling in an RNG.
pub fn filled(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let x = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        (x as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

/// `count` real videos sized for `profile`.
pub fn real_videos(profile: Profile, count: usize) -> Vec<CorpusEntry> {
    let cfg = RunConfig::profile(profile);
    let d = &cfg.data;
    (0..count)
        .map(|i| {
            let id = format!("bench-{i}");
            let v = generate_real_video(&id, i as u64, d.video_len, d.frame_size, d.frame_size, &d.dynamics)
                .expect("valid profile extents");
            CorpusEntry { id, video: v.video, label: Label::Real, kind: ForgeryKind::None, split: Split::Pretrain, region: None }
        })
        .collect()
}
