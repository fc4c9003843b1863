//! Forgery classifier: frozen backbone, trainable two-layer head, video-level scoring.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{embed_clips, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, kaiming_uniform, real, AdamConfig, AdamState, Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::stream;
use crate::videodata::{clip_at, CorpusEntry, FrameClip, Video};

/// Namespaces the detector needs from a pretrained checkpoint.
pub const BACKBONE_NAMESPACES: [&str; 3] = ["encoder.", "embedder.", "transformer."];

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Clips cached per training video; each epoch visits every cached clip once.
    pub views_per_video: usize,
    pub optimizer: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { batch_size: 64, epochs: 20, views_per_video: 3, optimizer: AdamConfig::default() }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.views_per_video == 0 {
            return Err(Error::Validation("finetune config: batch_size and views_per_video must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_head<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = stream(seed, "init/head");
    let mut p = ParamStore::new();
    p.insert("head.fc1.weight", kaiming_uniform(&[cfg.d_model, cfg.head_hidden], cfg.d_model, &mut rng));
    p.insert("head.fc1.bias", Tensor::zeros(&[cfg.head_hidden]));
    p.insert("head.fc2.weight", kaiming_uniform(&[cfg.head_hidden, 2], cfg.head_hidden, &mut rng));
    p.insert("head.fc2.bias", Tensor::zeros(&[2]));
    p
}

/// Two-class logits `[B, 2]` from pooled representations `[B, d]`.
pub fn head_logits<T: Real>(tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
    let h = tape.linear(z, p.get("head.fc1.weight")?, Some(p.get("head.fc1.bias")?))?;
    let h = tape.gelu(h)?;
    tape.linear(h, p.get("head.fc2.weight")?, Some(p.get("head.fc2.bias")?))
}

/// Class probabilities `[B, 2]`; column 1 is the fake score.
pub fn head_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
    let logits = head_logits(tape, p, z)?;
    tape.softmax(logits)
}

/// Mean of `−ln max(p_label, 1e-12)` over rows.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, probs: Var, labels: Vec<usize>) -> Result<Var> {
    tape.nll_probs(probs, labels, real(PROB_CLAMP))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub struct FinetuneOutcome {
    pub params: ParamStore<f32>,
    pub log: Vec<FinetuneRecord>,
}

/// Fails unless every backbone namespace is present.
pub fn check_backbone(params: &ParamStore<f32>) -> Result<()> {
    for ns in BACKBONE_NAMESPACES {
        if !params.has_namespace(ns) {
            return Err(Error::Checkpoint(format!("checkpoint lacks the `{ns}*` parameters")));
        }
    }
    Ok(())
}

const EMBED_CHUNK: usize = 32;

/// Pooled representations of many clips, computed in chunks.
pub fn embed_many(params: &ParamStore<f32>, cfg: &ModelConfig, clips: &[FrameClip]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EMBED_CHUNK) {
        let refs: Vec<&FrameClip> = chunk.iter().collect();
        let z = embed_clips(params, cfg, &refs)?;
        out.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
    }
    Ok(out)
}

/// Trains only `head.*` on top of a frozen backbone. Representations of
/// `views_per_video` clips per video are computed once and reused every epoch.
pub fn finetune(
    videos: &[&CorpusEntry],
    backbone: &ParamStore<f32>,
    model: &ModelConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    model.validate()?;
    cfg.validate()?;
    check_backbone(backbone)?;
    if videos.is_empty() {
        return Err(Error::Validation("finetuning needs at least one video".into()));
    }
    let mut rng = stream(seed, "finetune/views");
    let mut clips = Vec::with_capacity(videos.len() * cfg.views_per_video);
    let mut labels = Vec::with_capacity(clips.capacity());
    for v in videos {
        let n = model.clip_len;
        if v.video.t < n {
            return Err(Error::Validation(format!("video `{}` has {} frames, clips need {n}", v.id, v.video.t)));
        }
        for _ in 0..cfg.views_per_video {
            clips.push(clip_at(&v.video, &v.id, rng.random_range(0..=v.video.t - n), n, model.frame_size)?);
            labels.push(v.label.class());
        }
    }
    let reps = embed_many(backbone, model, &clips)?;
    drop(clips);

    let mut head: ParamStore<f32> = init_head(model, seed);
    let mut state = AdamState::new(cfg.optimizer.clone());
    let mut rng = stream(seed, "finetune/order");
    let mut order: Vec<usize> = (0..reps.len()).collect();
    let mut log = Vec::new();
    let d = model.d_model;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let z: Vec<f32> = chunk.iter().flat_map(|&i| reps[i].iter().copied()).collect();
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let zv = tape.constant(Tensor::new(vec![chunk.len(), d], z)?);
            let probs = head_forward(&mut tape, &bound, zv)?;
            let loss = bce_loss(&mut tape, probs, chunk.iter().map(|&i| labels[i]).collect())?;
            let grads = tape.backward(loss)?;
            adam_step(&mut head, &bound.gradients(&grads), &mut state)?;
            log.push(FinetuneRecord { step: state.step(), loss: tape.value(loss).item() as f64, lr: cfg.optimizer.lr });
        }
    }
    let mut params = backbone.clone();
    params.merge(head);
    Ok(FinetuneOutcome { params, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub score: f64,
    pub per_clip_scores: Vec<f64>,
    pub label_pred: bool,
}

impl Prediction {
    pub fn from_clip_scores(video_id: &str, per_clip_scores: Vec<f64>, threshold: f64) -> Self {
        let score = per_clip_scores.iter().sum::<f64>() / per_clip_scores.len().max(1) as f64;
        Self { video_id: video_id.to_string(), score, per_clip_scores, label_pred: score >= threshold }
    }
}

/// Fake probabilities for pooled representations.
pub fn score_representations(params: &ParamStore<f32>, reps: &[Vec<f32>]) -> Result<Vec<f64>> {
    let Some(first) = reps.first() else { return Ok(Vec::new()) };
    let d = first.len();
    let mut tape = Tape::new();
    let bound = params.subset("head.").bind_frozen(&mut tape);
    let z = tape.constant(Tensor::new(vec![reps.len(), d], reps.concat())?);
    let probs = head_forward(&mut tape, &bound, z)?;
    let p = tape.value(probs);
    Ok((0..reps.len()).map(|r| p.row(r)[1] as f64).collect())
}

/// Clip offsets used to score a video, drawn from the video's own seeded stream.
pub fn prediction_clips(video: &Video, id: &str, model: &ModelConfig, clips: usize, seed: u64) -> Result<Vec<FrameClip>> {
    let n = model.clip_len;
    if video.t < n {
        return Err(Error::Validation(format!("video `{id}` has {} frames, clips need {n}", video.t)));
    }
    let mut rng = stream(seed, &format!("predict/{id}"));
    (0..clips).map(|_| clip_at(video, id, rng.random_range(0..=video.t - n), n, model.frame_size)).collect()
}

/// Mean fake probability over `clips` independently placed clips.
pub fn predict_video(
    video: &Video,
    id: &str,
    params: &ParamStore<f32>,
    model: &ModelConfig,
    clips: usize,
    threshold: f64,
    seed: u64,
) -> Result<Prediction> {
    let cs = prediction_clips(video, id, model, clips, seed)?;
    let scores = score_representations(params, &embed_many(params, model, &cs)?)?;
    Ok(Prediction::from_clip_scores(id, scores, threshold))
}

/// Batched [`predict_video`] over many videos.
pub fn predict_videos(
    videos: &[&CorpusEntry],
    params: &ParamStore<f32>,
    model: &ModelConfig,
    clips: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let mut all = Vec::with_capacity(videos.len() * clips);
    for v in videos {
        all.extend(prediction_clips(&v.video, &v.id, model, clips, seed)?);
    }
    let scores = score_representations(params, &embed_many(params, model, &all)?)?;
    Ok(videos
        .iter()
        .zip(scores.chunks(clips.max(1)))
        .map(|(v, s)| Prediction::from_clip_scores(&v.id, s.to_vec(), threshold))
        .collect())
}

pub fn write_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
