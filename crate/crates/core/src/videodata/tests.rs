use std::collections::HashMap;

use proptest::prelude::*;

use super::*;
use crate::rng::{derive_seed, seeded};

fn cfg() -> DynamicsConfig {
    DynamicsConfig::default()
}

fn real(seed: u64, t: usize, s: usize) -> SyntheticVideo {
    generate_real_video("v", seed, t, s, s, &cfg()).unwrap()
}

fn sorted_frames(v: &Video) -> Vec<Vec<u32>> {
    let mut f: Vec<Vec<u32>> = (0..v.t).map(|i| v.frame(i).iter().map(|x| x.to_bits()).collect()).collect();
    f.sort();
    f
}

#[test]
fn real_video_is_deterministic() {
    assert_eq!(real(5, 12, 32), real(5, 12, 32));
    assert_ne!(real(5, 12, 32).video, real(6, 12, 32).video);
}

#[test]
fn real_video_shape() {
    let v = real(1, 20, 64).video;
    assert_eq!((v.t, v.c, v.h, v.w), (20, 3, 64, 64));
    assert_eq!(v.frames.len(), 20 * 3 * 64 * 64);
    assert!(v.in_unit_range());
}

#[test]
fn invalid_extents_rejected() {
    assert!(generate_real_video("v", 1, 1, 32, 32, &cfg()).is_err());
    assert!(generate_real_video("v", 1, 10, 0, 32, &cfg()).is_err());
}

#[test]
fn smoothness_separates_real_from_resampled() {
    let bound = cfg().smoothness_bound;
    let (mut worst_real, mut least_fake_mean) = (0f64, f64::INFINITY);
    for s in 0..100u64 {
        let r = real(derive_seed(s, "real"), 24, 32);
        worst_real = worst_real.max(max_mean_abs_delta(&r.video));
        let f = generate_fake_video(&r, ForgeryKind::PerFrameResample, s, &cfg()).unwrap();
        let d = mean_abs_deltas(&f.video);
        least_fake_mean = least_fake_mean.min(d.iter().sum::<f64>() / d.len() as f64);
    }
    eprintln!("worst real max delta {worst_real:.4}, least fake mean delta {least_fake_mean:.4}, bound {bound}");
    assert!(worst_real < bound);
    assert!(least_fake_mean > bound);
}

#[test]
fn jitter_is_a_frame_permutation() {
    let r = real(3, 16, 16);
    let f = generate_fake_video(&r, ForgeryKind::TemporalJitter, 9, &cfg()).unwrap();
    assert_ne!(f.video, r.video);
    assert_eq!(sorted_frames(&f.video), sorted_frames(&r.video));
    assert_eq!((f.label, f.kind), (Label::Fake, ForgeryKind::TemporalJitter));
}

#[test]
fn jitter_without_swaps_rejected() {
    let r = real(3, 16, 16);
    let c = DynamicsConfig { jitter_swaps: 0, ..cfg() };
    assert!(generate_fake_video(&r, ForgeryKind::TemporalJitter, 1, &c).is_err());
    assert!(generate_fake_video(&r, ForgeryKind::None, 1, &cfg()).is_err());
}

#[test]
fn region_forgeries_stay_inside_their_rectangle() {
    let r = real(4, 10, 32);
    for kind in [ForgeryKind::RegionSplice, ForgeryKind::BlendBoundary] {
        let f = generate_fake_video(&r, kind, 2, &cfg()).unwrap();
        let rect = f.region.expect("region recorded");
        assert!(rect.y0 + rect.h <= 32 && rect.x0 + rect.w <= 32);
        assert!(f.video.in_unit_range());
        let mut changed_inside = false;
        for t in 0..10 {
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        let k = t * 3 * 32 * 32 + (c * 32 + y) * 32 + x;
                        let diff = f.video.frames[k] != r.video.frames[k];
                        if rect.contains(y, x) {
                            changed_inside |= diff;
                        } else {
                            assert!(!diff, "{kind:?} changed a pixel outside its region");
                        }
                    }
                }
            }
        }
        assert!(changed_inside);
    }
}

#[test]
fn forgery_kind_names_round_trip() {
    for k in [ForgeryKind::None].into_iter().chain(ForgeryKind::FAKES) {
        assert_eq!(k.name().parse::<ForgeryKind>().unwrap(), k);
        assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
    }
    assert!("deepfake".parse::<ForgeryKind>().is_err());
}

#[test]
fn clip_of_full_length_starts_at_zero() {
    let v = real(1, 8, 16).video;
    let mut rng = seeded(0);
    for _ in 0..20 {
        assert_eq!(sample_clip(&v, "v", 8, 16, &mut rng).unwrap().offset, 0);
    }
}

#[test]
fn clip_offsets_are_uniform() {
    // Two valid offsets; chi-square with one degree of freedom, critical value 6.635 at p = 0.01.
    let v = Video::new(21, 1, 2, 2, (0..21 * 4).map(|i| i as f32 / 100.0).collect()).unwrap();
    let mut rng = seeded(11);
    let draws = 4000;
    let mut counts = [0usize; 2];
    for _ in 0..draws {
        counts[sample_clip(&v, "v", 20, 2, &mut rng).unwrap().offset] += 1;
    }
    let expected = draws as f64 / 2.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(counts.iter().all(|&c| c > 0));
    assert!(chi2 < 6.635, "chi2 = {chi2}");
}

#[test]
fn clip_matches_source_slice() {
    let v = real(2, 12, 16).video;
    let mut rng = seeded(3);
    let clip = sample_clip(&v, "v", 5, 16, &mut rng).unwrap();
    let len = v.frame_len();
    assert_eq!(clip.frames, v.frames[clip.offset * len..(clip.offset + 5) * len]);
    assert_eq!(clip.shape(), [5, 3, 16, 16]);
}

#[test]
fn clip_too_long_rejected() {
    let v = real(2, 6, 16).video;
    assert!(sample_clip(&v, "v", 7, 16, &mut seeded(0)).is_err());
    assert!(sample_clip(&v, "v", 1, 16, &mut seeded(0)).is_err());
}

#[test]
fn resize_preserves_constants_and_range() {
    let frames = vec![0.3f32; 2 * 16 * 16];
    assert!(resize_frames(&frames, 2, 16, 16, 8, 8).iter().all(|&v| (v - 0.3).abs() < 1e-6));
    let v = real(1, 2, 32).video;
    let small = resize_frames(&v.frames, 6, 32, 32, 16, 16);
    assert_eq!(small.len(), 6 * 256);
    assert!(small.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn shuffle_never_identity() {
    let mut rng = seeded(7);
    for _ in 0..10_000 {
        let p = shuffle_permutation(3, &mut rng).unwrap();
        assert_ne!(p, vec![0, 1, 2]);
    }
}

#[test]
fn shuffle_of_two_is_the_swap() {
    let mut rng = seeded(8);
    for _ in 0..100 {
        assert_eq!(shuffle_permutation(2, &mut rng).unwrap(), vec![1, 0]);
    }
    assert!(shuffle_permutation(1, &mut rng).is_err());
    assert!(shuffle_permutation(0, &mut rng).is_err());
}

#[test]
fn shuffle_is_uniform_over_non_identity() {
    // Five non-identity permutations of three elements: 4 degrees of freedom,
    // critical value 13.277 at p = 0.01.
    let mut rng = seeded(21);
    let draws = 10_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(shuffle_permutation(3, &mut rng).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 5);
    let expected = draws as f64 / 5.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 13.277, "chi2 = {chi2}");
}

#[test]
fn shuffled_clip_reorders_frames() {
    let v = real(2, 6, 8).video;
    let clip = v.as_clip("v");
    let (s, perm) = shuffle_clip(&clip, &mut seeded(4)).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(s.frame(i), clip.frame(p));
    }
    let as_video = |c: &FrameClip| Video::new(c.n, c.c, c.h, c.w, c.frames.clone()).unwrap();
    assert_eq!(sorted_frames(&as_video(&s)), sorted_frames(&as_video(&clip)));
}

fn test_clip() -> FrameClip {
    real(12, 4, 16).video.as_clip("v")
}

#[test]
fn mild_noise_is_bounded() {
    let clip = test_clip();
    let spec = PerturbationSpec { kind: PerturbationKind::Noise, severity: 1, seed: 3 };
    let out = apply_perturbation(&clip, &spec, &SeveritySchedule::default()).unwrap();
    // 5 sigma over ~3k draws.
    assert!(out.frames.iter().zip(&clip.frames).all(|(a, b)| (a - b).abs() <= 0.05));
    assert_ne!(out.frames, clip.frames);
}

#[test]
fn blur_keeps_constant_images() {
    let clip = FrameClip { n: 2, c: 3, h: 8, w: 8, frames: vec![0.42; 2 * 3 * 64], source_id: "c".into(), offset: 0 };
    for severity in 1..=5 {
        let spec = PerturbationSpec { kind: PerturbationKind::Blur, severity, seed: 0 };
        let out = apply_perturbation(&clip, &spec, &SeveritySchedule::default()).unwrap();
        assert!(out.frames.iter().all(|&v| (v - 0.42).abs() < 1e-6));
    }
}

#[test]
fn identity_schedule_is_identity() {
    let clip = test_clip();
    for kind in PerturbationKind::ALL {
        let spec = PerturbationSpec { kind, severity: 3, seed: 1 };
        assert_eq!(apply_perturbation(&clip, &spec, &SeveritySchedule::identity()).unwrap(), clip, "{kind:?}");
    }
}

#[test]
fn pixelation_averages_cells() {
    let frames: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
    let clip = FrameClip { n: 1, c: 1, h: 4, w: 4, frames, source_id: "c".into(), offset: 0 };
    let spec = PerturbationSpec { kind: PerturbationKind::Pixelation, severity: 1, seed: 0 };
    let out = apply_perturbation(&clip, &spec, &SeveritySchedule::default()).unwrap();
    let cell = (0.0 + 1.0 + 4.0 + 5.0) / 64.0;
    assert!((out.frames[0] - cell).abs() < 1e-6 && (out.frames[5] - cell).abs() < 1e-6);
}

#[test]
fn full_desaturation_is_gray() {
    let clip = test_clip();
    let spec = PerturbationSpec { kind: PerturbationKind::Saturation, severity: 5, seed: 0 };
    let out = apply_perturbation(&clip, &spec, &SeveritySchedule::default()).unwrap();
    let plane = 16 * 16;
    for p in 0..plane {
        assert!((out.frames[p] - out.frames[plane + p]).abs() < 1e-6);
    }
}

#[test]
fn invalid_severity_rejected() {
    let clip = test_clip();
    for severity in [0, 6] {
        let spec = PerturbationSpec { kind: PerturbationKind::Noise, severity, seed: 0 };
        assert!(apply_perturbation(&clip, &spec, &SeveritySchedule::default()).is_err());
    }
    let bad = serde_json::from_str::<PerturbationSpec>(r#"{"kind":"sharpen","severity":1,"seed":0}"#);
    assert!(bad.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn perturbations_keep_shape_range_and_determinism(
        kind in 0usize..7, severity in 1u8..=5, seed in any::<u64>(), vseed in 0u64..50,
    ) {
        let clip = real(vseed, 3, 16).video.as_clip("v");
        let spec = PerturbationSpec { kind: PerturbationKind::ALL[kind], severity, seed };
        let a = apply_perturbation(&clip, &spec, &SeveritySchedule::default()).unwrap();
        let b = apply_perturbation(&clip, &spec, &SeveritySchedule::default()).unwrap();
        prop_assert_eq!(a.shape(), clip.shape());
        prop_assert!(a.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn permutation_application_preserves_multiset(n in 2usize..8, seed in any::<u64>()) {
        let items: Vec<u32> = (0..n as u32 * 2).collect();
        let perm = shuffle_permutation(n, &mut seeded(seed)).unwrap();
        let mut out = apply_permutation(&items, 2, &perm);
        prop_assert_ne!(&out, &items);
        out.sort();
        prop_assert_eq!(out, items);
    }
}

fn sample_manifest() -> Manifest {
    Manifest {
        entries: vec![
            ManifestEntry { path: "videos/a".into(), label: Label::Real, forgery_kind: ForgeryKind::None, split: Split::Pretrain },
            ManifestEntry {
                path: "videos/b".into(),
                label: Label::Fake,
                forgery_kind: ForgeryKind::RegionSplice,
                split: Split::Test,
            },
        ],
    }
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    write_manifest(&sample_manifest(), &path).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), sample_manifest());
}

#[test]
fn manifest_rejects_fake_in_pretrain() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(
        &path,
        "{\"path\":\"a\",\"label\":\"real\",\"forgery_kind\":\"none\",\"split\":\"train\"}\n\
         {\"path\":\"bad\",\"label\":\"fake\",\"forgery_kind\":\"temporal-jitter\",\"split\":\"pretrain\"}\n",
    )
    .unwrap();
    let err = read_manifest(&path).unwrap_err().to_string();
    assert!(err.contains(":2") && err.contains("bad"), "{err}");
    assert!(read_manifest(&path).unwrap_err().is_validation());
}

#[test]
fn manifest_parse_error_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, "{\"path\":\"a\",\"label\":\"real\",\"forgery_kind\":\"none\",\"split\":\"train\"}\n{oops\n").unwrap();
    match read_manifest(&path) {
        Err(crate::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn empty_manifest_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(read_manifest(&path).unwrap().entries.is_empty());
}

#[test]
fn video_storage_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = real(1, 3, 8).video;
    write_video(dir.path(), &v).unwrap();
    assert_eq!(read_video(dir.path()).unwrap(), v);
    let header: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("header.json")).unwrap()).unwrap();
    assert_eq!(header["T"], 3);
    assert_eq!(header["dtype"], "f32le");
    std::fs::write(dir.path().join("frames.bin"), [0u8; 10]).unwrap();
    assert!(read_video(dir.path()).is_err());
}

#[test]
fn corpus_round_trip() {
    let cfg = CorpusConfig {
        video_len: 4,
        frame_size: 8,
        pretrain_real: 2,
        train_real: 1,
        train_fake: 1,
        test_real: 1,
        test_fake: 1,
        dynamics: cfg(),
    };
    let corpus = generate_corpus(&cfg, 5).unwrap();
    assert_eq!(corpus.entries.len(), 2 + 1 + 1 + 2 * 4);
    assert_eq!(corpus, generate_corpus(&cfg, 5).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(load_corpus(&manifest).unwrap(), corpus);
    std::fs::remove_dir_all(dir.path().join("videos/pretrain-real-0000")).unwrap();
    assert!(load_corpus(&manifest).unwrap_err().is_validation());
}
