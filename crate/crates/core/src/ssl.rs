//! Self-supervised pretraining on real videos: masked spatial-feature prediction
//! plus an order-shuffle contrastive term.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{embed_tokens, encode_frames, frames_tensor, pool_representation, transformer_forward, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, kaiming_uniform, real, AdamConfig, AdamState, Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::{stream, SeededRng};
use crate::videodata::{clip_at, shuffle_permutation, CorpusEntry, FrameClip, Label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveSource {
    /// Another clip of the anchor's video at a different offset, falling back to
    /// another video in the batch when the video has a single valid offset.
    SameVideo,
    /// A clip of another video in the batch.
    AnyReal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSet {
    /// Shuffled versions of every clip in the batch.
    AllShuffles,
    /// Only the anchor's own shuffled version.
    OwnShuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    /// Fraction of frame features zeroed before the Transformer.
    pub alpha: f64,
    pub tau: f64,
    pub eps: f64,
    pub lambda_spm: f64,
    pub lambda_tcm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub positive: PositiveSource,
    pub negatives: NegativeSet,
    /// Treat the clean features as a constant target in the spatial
    /// prediction loss, so the encoder cannot shrink them to lower it.
    pub stop_target_gradient: bool,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub optimizer: AdamConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 0.5,
            eps: 1e-8,
            lambda_spm: 1.0,
            lambda_tcm: 0.5,
            batch_size: 64,
            epochs: 10,
            positive: PositiveSource::SameVideo,
            negatives: NegativeSet::AllShuffles,
            stop_target_gradient: true,
            checkpoint_every: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("ssl config: {m}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.tau > 0.0) || !(self.eps > 0.0) {
            return fail("tau and eps must be positive".into());
        }
        if !(self.lambda_spm >= 0.0) || !(self.lambda_tcm >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        Ok(())
    }
}

/// Decoder parameters: one `1 × taps` convolution along the token axis.
pub fn init_decoder<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = stream(seed, "init/decoder");
    let mut p = ParamStore::new();
    let (d, d_f, k) = (cfg.d_model, cfg.feature_dim(), cfg.decoder_taps);
    p.insert("decoder.weight", kaiming_uniform(&[d_f, d, 1, k], d * k, &mut rng));
    p.insert("decoder.bias", Tensor::zeros(&[d_f]));
    p
}

/// Positions (1-based) where `a` holds a value and `b` is masked (`None`).
pub fn masked_index_set<A, B>(a: &[Option<A>], b: &[Option<B>]) -> Result<BTreeSet<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("sequences of length {} and {} cannot be compared", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).enumerate().filter(|(_, (x, y))| x.is_some() && y.is_none()).map(|(i, _)| i + 1).collect())
}

/// Reads feature rows as a masked sequence: an all-zero row counts as masked.
pub fn rows_as_masked<T: Real>(features: &Tensor<T>) -> Vec<Option<&[T]>> {
    (0..features.rows())
        .map(|r| {
            let row = features.row(r);
            (!row.iter().all(|v| v.is_zero())).then_some(row)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted 0-based masked positions.
    pub masked: Vec<usize>,
    pub len: usize,
}

impl MaskPlan {
    pub fn one_based(&self) -> BTreeSet<usize> {
        self.masked.iter().map(|i| i + 1).collect()
    }

    /// 0 at masked positions, 1 elsewhere.
    pub fn keep_factors<T: Real>(&self) -> Vec<T> {
        let mut f = vec![T::one(); self.len];
        for &i in &self.masked {
            f[i] = T::zero();
        }
        f
    }
}

/// Draws `round(n·alpha)` distinct positions uniformly without replacement.
pub fn mask_plan<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<MaskPlan> {
    let count = (n as f64 * alpha).round() as usize;
    if !(alpha > 0.0 && alpha < 1.0) || count == 0 || count > n {
        return Err(Error::Validation(format!("mask ratio {alpha} is degenerate for {n} frames")));
    }
    let mut masked = index::sample(rng, n, count).into_vec();
    masked.sort_unstable();
    Ok(MaskPlan { masked, len: n })
}

/// Zeroes the planned rows of an `[n, d]` feature sequence.
pub fn mask_features<T: Real, R: Rng + ?Sized>(features: &Tensor<T>, alpha: f64, rng: &mut R) -> Result<(Tensor<T>, MaskPlan)> {
    let plan = mask_plan(features.rows(), alpha, rng)?;
    let d = features.last_dim();
    let mut out = features.clone();
    for &i in &plan.masked {
        out.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
    }
    Ok((out, plan))
}

/// Predicted spatial features `[rows, d_f]` from tokens `[rows, d]`.
pub fn decode_features<T: Real>(tape: &mut Tape<T>, p: &Bound, tokens: Var, seq: usize) -> Result<Var> {
    tape.seq_conv(tokens, p.get("decoder.weight")?, p.get("decoder.bias")?, seq)
}

/// Mean over masked rows of the per-row mean squared error.
pub fn spm_loss<T: Real>(tape: &mut Tape<T>, predicted: Var, target: Var, masked_rows: Vec<usize>) -> Result<Var> {
    tape.masked_mse(predicted, target, masked_rows)
}

/// Contrastive loss from pooled representations. Anchor `i` is scored against
/// `positives[i]` and `negatives[j]` for each `j` in `negative_sets[i]`.
pub fn tcm_loss<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Var,
    negative_sets: &[Vec<usize>],
    tau: f64,
    eps: f64,
) -> Result<Var> {
    let b = tape.shape(anchors)[0];
    let m = negative_sets.first().map_or(0, Vec::len);
    if negative_sets.len() != b || m == 0 || negative_sets.iter().any(|s| s.len() != m) {
        return Err(Error::Contract(format!("each of the {b} anchors needs the same non-zero number of negatives")));
    }
    let pos = tape.cosine_pairs(anchors, positives, (0..b).map(|i| (i, i)).collect(), real(eps))?;
    let pairs = negative_sets.iter().enumerate().flat_map(|(i, s)| s.iter().map(move |&j| (i, j))).collect();
    let neg = tape.cosine_pairs(anchors, negatives, pairs, real(eps))?;
    let pos = tape.reshape(pos, &[b, 1])?;
    let neg = tape.reshape(neg, &[b, m])?;
    let sims = tape.concat_cols(&[pos, neg])?;
    let logits = tape.scale(sims, real(1.0 / tau))?;
    tape.cross_entropy(logits, vec![0; b])
}

/// Evaluates the contrastive loss for one anchor on plain vectors.
pub fn tcm_loss_value(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64, eps: f64) -> Result<f64> {
    let d = anchor.len();
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(vec![1, d], anchor.to_vec())?);
    let p = tape.constant(Tensor::new(vec![1, d], positive.to_vec())?);
    let flat: Vec<f64> = negatives.iter().flat_map(|n| n.iter().copied()).collect();
    if negatives.is_empty() || flat.len() != negatives.len() * d {
        return Err(Error::Contract("the contrastive loss needs at least one negative of matching dimension".into()));
    }
    let n = tape.constant(Tensor::new(vec![negatives.len(), d], flat)?);
    let loss = tcm_loss(&mut tape, a, p, n, &[(0..negatives.len()).collect()], tau, eps)?;
    Ok(tape.value(loss).item())
}

/// Evaluates the spatial prediction loss on plain tensors.
pub fn spm_loss_value(predicted: &Tensor<f64>, target: &Tensor<f64>, plan: &MaskPlan) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(predicted.clone());
    let t = tape.constant(target.clone());
    let loss = spm_loss(&mut tape, p, t, plan.masked.clone())?;
    Ok(tape.value(loss).item())
}

pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> f64 {
    crate::numerics::cosine(a, b, eps)
}

/// Clips and random choices for one pretraining step.
#[derive(Clone, Debug)]
pub struct SslBatch {
    pub anchors: Vec<FrameClip>,
    pub positives: Vec<FrameClip>,
    /// Frame order of each anchor's shuffled negative.
    pub perms: Vec<Vec<usize>>,
    pub masks: Vec<MaskPlan>,
    pub negative_sets: Vec<Vec<usize>>,
}

/// Samples anchors, positives, shuffles and masks for a batch of real videos.
pub fn sample_batch(
    videos: &[&CorpusEntry],
    ssl: &SslConfig,
    model: &ModelConfig,
    rng: &mut SeededRng,
) -> Result<SslBatch> {
    let b = videos.len();
    if b < 2 {
        return Err(Error::Validation(format!("a contrastive batch needs at least 2 clips, got {b}")));
    }
    let n = model.clip_len;
    let mut anchors = Vec::with_capacity(b);
    for v in videos {
        if v.label != Label::Real {
            return Err(Error::Validation(format!("pretraining batch contains fake video `{}`", v.id)));
        }
        if v.video.t < n {
            return Err(Error::Validation(format!("video `{}` has {} frames, clips need {n}", v.id, v.video.t)));
        }
        let offset = rng.random_range(0..=v.video.t - n);
        anchors.push(clip_at(&v.video, &v.id, offset, n, model.frame_size)?);
    }
    let mut positives = Vec::with_capacity(b);
    for (i, v) in videos.iter().enumerate() {
        let span = v.video.t - n;
        let clip = if ssl.positive == PositiveSource::SameVideo && span > 0 {
            let mut offset = rng.random_range(0..span);
            if offset >= anchors[i].offset {
                offset += 1;
            }
            clip_at(&v.video, &v.id, offset, n, model.frame_size)?
        } else {
            let other = (i + rng.random_range(1..b)) % b;
            let o = videos[other];
            clip_at(&o.video, &o.id, rng.random_range(0..=o.video.t - n), n, model.frame_size)?
        };
        positives.push(clip);
    }
    let perms = (0..b).map(|_| shuffle_permutation(n, rng)).collect::<Result<Vec<_>>>()?;
    let masks = (0..b).map(|_| mask_plan(n, ssl.alpha, rng)).collect::<Result<Vec<_>>>()?;
    let negative_sets = (0..b)
        .map(|i| match ssl.negatives {
            NegativeSet::AllShuffles => (0..b).collect(),
            NegativeSet::OwnShuffle => vec![i],
        })
        .collect();
    Ok(SslBatch { anchors, positives, perms, masks, negative_sets })
}

/// Handles produced by one pretraining forward pass.
pub struct SslOutputs {
    pub total: Var,
    pub spm: Var,
    pub tcm: Var,
    /// Per-frame encoder features of the anchors `[B·n, d_f]`.
    pub features: Var,
    /// Shuffled anchor features fed to the Transformer `[B·n, d_f]`.
    pub shuffled_features: Var,
    /// Pooled representations `[B, d]`.
    pub anchors: Var,
    pub positives: Var,
    pub negatives: Var,
}

/// Forward pass for both objectives. The encoder runs once per distinct clip;
/// masked, clean, positive and shuffled sequences share one Transformer pass.
pub fn ssl_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, model: &ModelConfig, ssl: &SslConfig, batch: &SslBatch) -> Result<SslOutputs> {
    let b = batch.anchors.len();
    let n = model.clip_len;
    let clips: Vec<&FrameClip> = batch.anchors.iter().chain(&batch.positives).collect();
    let frames = tape.constant(frames_tensor(&clips)?);
    let enc = encode_frames(tape, p, frames)?;
    let rows = b * n;
    let features = tape.gather_rows(enc.features, (0..rows).collect())?;
    let pos_features = tape.gather_rows(enc.features, (rows..2 * rows).collect())?;
    let keep: Vec<T> = batch.masks.iter().flat_map(|m| m.keep_factors()).collect();
    let masked = tape.scale_rows(features, keep)?;
    let shuffle_index = batch
        .perms
        .iter()
        .enumerate()
        .flat_map(|(c, perm)| perm.iter().map(move |&j| c * n + j))
        .collect();
    let shuffled = tape.gather_rows(features, shuffle_index)?;
    let sequences = tape.concat_rows(&[masked, features, pos_features, shuffled])?;
    let z0 = embed_tokens(tape, p, model, sequences, n)?;
    let tokens = transformer_forward(tape, p, model, z0, n)?;

    let masked_tokens = tape.gather_rows(tokens, (0..rows).collect())?;
    let predicted = decode_features(tape, p, masked_tokens, n)?;
    let masked_rows = batch.masks.iter().enumerate().flat_map(|(c, m)| m.masked.iter().map(move |&i| c * n + i)).collect();
    let target = if ssl.stop_target_gradient { tape.constant(tape.value(features).clone()) } else { features };
    let spm = spm_loss(tape, predicted, target, masked_rows)?;

    let pooled = pool_representation(tape, tokens, n)?;
    let anchors = tape.gather_rows(pooled, (b..2 * b).collect())?;
    let positives = tape.gather_rows(pooled, (2 * b..3 * b).collect())?;
    let negatives = tape.gather_rows(pooled, (3 * b..4 * b).collect())?;
    let tcm = tcm_loss(tape, anchors, positives, negatives, &batch.negative_sets, ssl.tau, ssl.eps)?;

    let total = total_ssl_loss(tape, spm, tcm, ssl.lambda_spm, ssl.lambda_tcm)?;
    Ok(SslOutputs { total, spm, tcm, features, shuffled_features: shuffled, anchors, positives, negatives })
}

/// `λ_spm · spm + λ_tcm · tcm`.
pub fn total_ssl_loss<T: Real>(tape: &mut Tape<T>, spm: Var, tcm: Var, lambda_spm: f64, lambda_tcm: f64) -> Result<Var> {
    let a = tape.scale(spm, real(lambda_spm))?;
    let b = tape.scale(tcm, real(lambda_tcm))?;
    tape.add(a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_spm: f64,
    pub loss_tcm: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub params: ParamStore<f32>,
    pub log: Vec<PretrainRecord>,
}

/// Trains encoder, embedder, Transformer and decoder on real videos.
/// `on_checkpoint` runs every `checkpoint_every` steps.
pub fn pretrain(
    videos: &[&CorpusEntry],
    model: &ModelConfig,
    ssl: &SslConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(u64, &ParamStore<f32>) -> Result<()>,
) -> Result<PretrainOutcome> {
    model.validate()?;
    ssl.validate()?;
    if let Some(bad) = videos.iter().find(|v| v.label != Label::Real) {
        return Err(Error::Validation(format!("pretraining set contains fake video `{}`", bad.id)));
    }
    if videos.len() < 2 {
        return Err(Error::Validation(format!("pretraining needs at least 2 videos, got {}", videos.len())));
    }
    let mut params = crate::backbone::init_backbone::<f32>(model, seed);
    params.merge(init_decoder(model, seed));
    let mut state = AdamState::new(ssl.optimizer.clone());
    let mut rng = stream(seed, "pretrain");
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..videos.len()).collect();
    for _ in 0..ssl.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(ssl.batch_size).filter(|c| c.len() >= 2) {
            let picked: Vec<&CorpusEntry> = chunk.iter().map(|&i| videos[i]).collect();
            let batch = sample_batch(&picked, ssl, model, &mut rng)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = ssl_forward(&mut tape, &bound, model, ssl, &batch)?;
            let grads = tape.backward(out.total)?;
            adam_step(&mut params, &bound.gradients(&grads), &mut state)?;
            let record = PretrainRecord {
                step: state.step(),
                loss_total: tape.value(out.total).item() as f64,
                loss_spm: tape.value(out.spm).item() as f64,
                loss_tcm: tape.value(out.tcm).item() as f64,
                lr: ssl.optimizer.lr,
            };
            log.push(record);
            if ssl.checkpoint_every > 0 && state.step() % ssl.checkpoint_every as u64 == 0 {
                on_checkpoint(state.step(), &params)?;
            }
        }
    }
    Ok(PretrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::backbone::init_backbone;
    use crate::rng::seeded;
    use crate::testutil::{fd_check, small_model};
    use crate::videodata::{generate_real_video, DynamicsConfig, ForgeryKind, Split};

    fn reals(count: usize, t: usize) -> Vec<CorpusEntry> {
        (0..count)
            .map(|i| {
                let id = format!("r{i}");
                let v = generate_real_video(&id, i as u64, t, 8, 8, &DynamicsConfig::default()).unwrap();
                CorpusEntry { id, video: v.video, label: Label::Real, kind: ForgeryKind::None, split: Split::Pretrain, region: None }
            })
            .collect()
    }

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn index_set_matches_worked_example() {
        let a = [Some('a'), Some('b'), Some('c'), Some('d')];
        let b = [Some('a'), None, Some('c'), None];
        assert_eq!(masked_index_set(&a, &b).unwrap(), BTreeSet::from([2, 4]));
        assert!(masked_index_set(&a, &a).unwrap().is_empty());
        let none = [None::<char>; 4];
        assert_eq!(masked_index_set(&a, &none).unwrap(), BTreeSet::from([1, 2, 3, 4]));
        assert!(masked_index_set(&a, &none[..3]).is_err());
    }

    #[test]
    fn masking_zeroes_exactly_the_plan() {
        let mut rng = seeded(3);
        let f = Tensor::<f64>::from_fn(&[20, 6], |i| 1.0 + i as f64);
        let (fm, plan) = mask_features(&f, 0.5, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 10);
        assert_eq!(masked_index_set(&rows_as_masked(&f), &rows_as_masked(&fm)).unwrap(), plan.one_based());
        for r in 0..20 {
            if plan.masked.contains(&r) {
                assert!(fm.row(r).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(fm.row(r), f.row(r));
            }
        }
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let mut rng = seeded(0);
        for (n, alpha) in [(8, 0.0), (8, 1.0), (1, 0.4), (4, -0.5)] {
            assert!(matches!(mask_plan(n, alpha, &mut rng), Err(Error::Validation(_))), "{n} {alpha}");
        }
    }

    #[test]
    fn decoder_shapes_and_zero_map() {
        let cfg = ModelConfig { clip_len: 20, ..small_model() };
        let mut p = init_decoder::<f64>(&cfg, 0);
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let tokens = tape.constant(Tensor::from_fn(&[20, 8], |i| (i as f64).sin()));
        let out = decode_features(&mut tape, &b, tokens, 20).unwrap();
        assert_eq!(tape.shape(out), &[20, 4]);

        let zeros = tape.constant(Tensor::zeros(&[20, 8]));
        let out = decode_features(&mut tape, &b, zeros, 20).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        // Center tap copying the first d_f token components.
        let mut w = Tensor::zeros(&[4, 8, 1, 3]);
        for o in 0..4 {
            w.data_mut()[((o * 8) + o) * 3 + 1] = 1.0;
        }
        *p.get_mut("decoder.weight").unwrap() = w;
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let x = Tensor::from_fn(&[20, 8], |i| i as f64 * 0.1);
        let tokens = tape.constant(x.clone());
        let out = decode_features(&mut tape, &b, tokens, 20).unwrap();
        for r in 0..20 {
            assert_eq!(tape.value(out).row(r), &x.row(r)[..4]);
        }
    }

    #[test]
    fn spm_examples() {
        let plan = MaskPlan { masked: vec![1], len: 3 };
        let target = t64(&[3, 2], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let mut pred = target.clone();
        pred.data_mut()[0] = 50.0;
        pred.data_mut()[5] = -7.0;
        assert_eq!(spm_loss_value(&pred, &target, &plan).unwrap(), 0.0);

        pred.data_mut()[2] = 4.0;
        pred.data_mut()[3] = 0.0;
        assert_eq!(spm_loss_value(&pred, &target, &plan).unwrap(), 4.0);

        let one = MaskPlan { masked: vec![0, 1], len: 3 };
        let mut p1 = target.clone();
        p1.data_mut()[0] += 0.5;
        let base = spm_loss_value(&p1, &target, &one).unwrap();
        p1.data_mut()[0] += 0.5;
        assert!((spm_loss_value(&p1, &target, &one).unwrap() - 4.0 * base).abs() < 1e-12);

        let empty = MaskPlan { masked: vec![], len: 3 };
        assert!(spm_loss_value(&pred, &target, &empty).is_err());
    }

    #[test]
    fn tcm_closed_forms() {
        let a = [1.0, 0.0];
        let l = tcm_loss_value(&a, &[0.6, 0.8], &[&[0.6, -0.8]], 0.5, 1e-8).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-9);
        let l = tcm_loss_value(&a, &[3.0, 0.0], &[&[-2.0, 0.0]], 0.5, 1e-8).unwrap();
        assert!((l - (1.0 + (-4f64).exp()).ln()).abs() < 1e-9);
        assert!((l - 0.01815).abs() < 1e-5);
        assert!(tcm_loss_value(&a, &a, &[], 0.5, 1e-8).is_err());
    }

    #[test]
    fn tcm_far_negative_vanishes() {
        // The most dissimilar negative a cosine allows, at a tiny temperature.
        let a = [1.0, 0.0];
        let base = tcm_loss_value(&a, &[0.8, 0.6], &[&[0.0, 1.0]], 0.05, 1e-8).unwrap();
        let more = tcm_loss_value(&a, &[0.8, 0.6], &[&[0.0, 1.0], &[-1.0, 0.0]], 0.05, 1e-8).unwrap();
        assert!((more - base).abs() < 1e-8);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0], 1e-8) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0], 1e-8), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[0.0, 0.0], 1e-8), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::scalar(0.8));
        let c = tape.constant(Tensor::scalar(0.4));
        let check = |tape: &mut Tape<f64>, l1, l2, want: f64| {
            let t = total_ssl_loss(tape, s, c, l1, l2).unwrap();
            assert!((tape.value(t).item() - want).abs() < 1e-15);
        };
        check(&mut tape, 1.0, 0.5, 1.0);
        check(&mut tape, 1.0, 0.0, 0.8);
        check(&mut tape, 0.0, 0.0, 0.0);
    }

    #[test]
    fn batch_of_two_counts() {
        let cfg = small_model();
        let vids = reals(2, 8);
        let refs: Vec<&CorpusEntry> = vids.iter().collect();
        let ssl = SslConfig::default();
        let batch = sample_batch(&refs, &ssl, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(batch.anchors.len(), 2);
        assert_eq!(batch.positives.len(), 2);
        assert_eq!(batch.negative_sets, vec![vec![0, 1], vec![0, 1]]);
        for (a, p) in batch.anchors.iter().zip(&batch.positives) {
            assert!(a.offset != p.offset || a.source_id != p.source_id);
        }
        let own = SslConfig { negatives: NegativeSet::OwnShuffle, ..ssl.clone() };
        let batch = sample_batch(&refs, &own, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(batch.negative_sets, vec![vec![0], vec![1]]);
        assert!(sample_batch(&refs[..1], &ssl, &cfg, &mut seeded(1)).is_err());
    }

    #[test]
    fn short_videos_fall_back_to_another_clip() {
        let cfg = small_model();
        let vids = reals(3, 4);
        let refs: Vec<&CorpusEntry> = vids.iter().collect();
        let batch = sample_batch(&refs, &SslConfig::default(), &cfg, &mut seeded(2)).unwrap();
        for (a, p) in batch.anchors.iter().zip(&batch.positives) {
            assert_ne!(a.source_id, p.source_id);
        }
    }

    #[test]
    fn negatives_are_permutations_of_anchor_features() {
        let cfg = small_model();
        let vids = reals(3, 8);
        let refs: Vec<&CorpusEntry> = vids.iter().collect();
        let ssl = SslConfig::default();
        let batch = sample_batch(&refs, &ssl, &cfg, &mut seeded(4)).unwrap();
        let p = crate::backbone::init_model::<f64>(&cfg, 0);
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let out = ssl_forward(&mut tape, &b, &cfg, &ssl, &batch).unwrap();
        let (f, s) = (tape.value(out.features), tape.value(out.shuffled_features));
        for (c, perm) in batch.perms.iter().enumerate() {
            for (i, &j) in perm.iter().enumerate() {
                assert_eq!(s.row(c * 4 + i), f.row(c * 4 + j));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_model();
        let vids = reals(3, 8);
        let refs: Vec<&CorpusEntry> = vids.iter().collect();
        // The finite-difference oracle sees the target move with the encoder.
        let ssl = SslConfig { stop_target_gradient: false, ..SslConfig::default() };
        let batch = sample_batch(&refs, &ssl, &cfg, &mut seeded(5)).unwrap();
        let mut p = init_backbone::<f64>(&cfg, 1);
        p.merge(init_decoder(&cfg, 1));
        let pick = |which: usize| {
            let (ssl, batch, cfg) = (&ssl, &batch, &cfg);
            move |tape: &mut Tape<f64>, b: &Bound| {
                let out = ssl_forward(tape, b, cfg, ssl, batch)?;
                Ok([out.total, out.spm, out.tcm][which])
            }
        };
        for which in 0..3 {
            let (err, at) = fd_check(&p, "", 4, pick(which));
            assert!(err < 1e-3, "loss {which}: relative error {err} at {at}");
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_rejects_fakes() {
        let cfg = small_model();
        let mut vids = reals(4, 8);
        let refs: Vec<&CorpusEntry> = vids.iter().collect();
        let ssl = SslConfig { batch_size: 2, epochs: 1, ..SslConfig::default() };
        let a = pretrain(&refs, &cfg, &ssl, 9, |_, _| Ok(())).unwrap();
        let b = pretrain(&refs, &cfg, &ssl, 9, |_, _| Ok(())).unwrap();
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert!(a.params.has_namespace("decoder."));

        vids[2].label = Label::Fake;
        vids[2].kind = ForgeryKind::TemporalJitter;
        let refs: Vec<&CorpusEntry> = vids.iter().collect();
        assert!(matches!(pretrain(&refs, &cfg, &ssl, 9, |_, _| Ok(())), Err(Error::Validation(_))));
    }

    #[test]
    fn periodic_checkpoints_fire() {
        let cfg = small_model();
        let vids = reals(4, 8);
        let refs: Vec<&CorpusEntry> = vids.iter().collect();
        let ssl = SslConfig { batch_size: 2, epochs: 2, checkpoint_every: 2, ..SslConfig::default() };
        let mut steps = Vec::new();
        pretrain(&refs, &cfg, &ssl, 1, |s, _| {
            steps.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, vec![2, 4]);
    }

    proptest! {
        #[test]
        fn tcm_matches_direct_evaluation(
            sims in prop::collection::vec(-1.0f64..1.0, 2..8),
            tau in 0.05f64..2.0,
        ) {
            // Unit vectors in the plane realizing each similarity with the anchor.
            let unit = |s: f64| vec![s, (1.0 - s * s).max(0.0).sqrt()];
            let negs: Vec<Vec<f64>> = sims[1..].iter().map(|&s| unit(s)).collect();
            let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            let got = tcm_loss_value(&[1.0, 0.0], &unit(sims[0]), &refs, tau, 1e-8).unwrap();
            let denom: f64 = sims.iter().map(|s| (s / tau).exp()).sum();
            let want = -((sims[0] / tau).exp() / denom).ln();
            prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
            prop_assert!(got > 0.0);
        }

        #[test]
        fn cosine_symmetric_and_bounded(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let (x, y) = (cosine_sim(&a, &b, 1e-8), cosine_sim(&b, &a, 1e-8));
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(x.abs() <= 1.0 + 1e-9);
        }

        #[test]
        fn spm_ignores_unmasked_predictions(seed in any::<u64>(), noise in -10.0f64..10.0) {
            let mut rng = seeded(seed);
            let target = Tensor::<f64>::from_fn(&[6, 3], |_| rng.random_range(-1.0..1.0));
            let plan = mask_plan(6, 0.5, &mut rng).unwrap();
            let pred = Tensor::<f64>::from_fn(&[6, 3], |_| rng.random_range(-1.0..1.0));
            let mut moved = pred.clone();
            for r in (0..6).filter(|r| !plan.masked.contains(r)) {
                moved.data_mut()[r * 3..r * 3 + 3].iter_mut().for_each(|v| *v += noise);
            }
            prop_assert_eq!(spm_loss_value(&pred, &target, &plan).unwrap(), spm_loss_value(&moved, &target, &plan).unwrap());
        }
    }
}
