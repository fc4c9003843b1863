//! Per-frame convolutional encoder, token embedding, Transformer blocks and clip pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kaiming_uniform, normal, real, Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::stream;
use crate::videodata::FrameClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per clip; also the number of learned positions.
    pub clip_len: usize,
    pub frame_size: usize,
    /// Output channels of the three encoder convolutions. The last one is the
    /// per-frame feature dimension.
    pub channels: [usize; 3],
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub head_hidden: usize,
    pub decoder_taps: usize,
    pub ln_eps: f64,
    pub pos_init_std: f64,
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("model config: {m}")));
        if self.clip_len < 2 {
            return fail(format!("clip_len must be at least 2, got {}", self.clip_len));
        }
        if self.frame_size == 0 || self.frame_size % 8 != 0 {
            return fail(format!("frame_size must be a positive multiple of 8, got {}", self.frame_size));
        }
        if self.channels.contains(&0) || self.d_model == 0 || self.mlp_dim == 0 || self.head_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.decoder_taps % 2 == 0 {
            return fail(format!("decoder_taps must be odd, got {}", self.decoder_taps));
        }
        if !(self.ln_eps > 0.0) || !(self.pos_init_std >= 0.0) {
            return fail("ln_eps must be positive and pos_init_std non-negative".into());
        }
        Ok(())
    }
}

const CONVS: [&str; 3] = ["conv1", "conv2", "conv3"];

/// Encoder, embedder and Transformer parameters.
pub fn init_backbone<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut p = ParamStore::new();
    let mut rng = stream(seed, "init/encoder");
    let mut c_in = 3;
    for (name, &c_out) in CONVS.iter().zip(&cfg.channels) {
        p.insert(format!("encoder.{name}.weight"), kaiming_uniform(&[c_out, c_in, 3, 3], c_in * 9, &mut rng));
        p.insert(format!("encoder.{name}.bias"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
    let (d, d_f) = (cfg.d_model, cfg.feature_dim());
    let mut rng = stream(seed, "init/embedder");
    p.insert("embedder.proj.weight", kaiming_uniform(&[d_f, d], d_f, &mut rng));
    p.insert("embedder.pos", normal(&[cfg.clip_len, d], cfg.pos_init_std, &mut rng));
    let mut rng = stream(seed, "init/transformer");
    for k in 0..cfg.depth {
        let b = format!("transformer.block{k:02}");
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{b}.{ln}.gamma"), Tensor::ones(&[d]));
            p.insert(format!("{b}.{ln}.beta"), Tensor::zeros(&[d]));
        }
        for proj in ["q", "k", "v", "o"] {
            p.insert(format!("{b}.attn.{proj}.weight"), normal(&[d, d], (1.0 / d as f64).sqrt(), &mut rng));
            p.insert(format!("{b}.attn.{proj}.bias"), Tensor::zeros(&[d]));
        }
        p.insert(format!("{b}.mlp.fc1.weight"), kaiming_uniform(&[d, cfg.mlp_dim], d, &mut rng));
        p.insert(format!("{b}.mlp.fc1.bias"), Tensor::zeros(&[cfg.mlp_dim]));
        p.insert(format!("{b}.mlp.fc2.weight"), normal(&[cfg.mlp_dim, d], (1.0 / cfg.mlp_dim as f64).sqrt(), &mut rng));
        p.insert(format!("{b}.mlp.fc2.bias"), Tensor::zeros(&[d]));
    }
    p
}

/// Every parameter group: backbone, decoder and head.
pub fn init_model<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut p = init_backbone(cfg, seed);
    p.merge(crate::ssl::init_decoder(cfg, seed));
    p.merge(crate::detector::init_head(cfg, seed));
    p
}

/// Stacks clips into one `[Σn, C, H, W]` frame batch.
pub fn frames_tensor<T: Real>(clips: &[&FrameClip]) -> Result<Tensor<T>> {
    let first = clips.first().ok_or_else(|| Error::dim("no clips to stack"))?;
    let [_, c, h, w] = first.shape();
    let mut data = Vec::new();
    let mut frames = 0;
    for clip in clips {
        if clip.shape()[1..] != [c, h, w] {
            return Err(Error::dim(format!("clip shapes {:?} and {:?} differ", first.shape(), clip.shape())));
        }
        data.extend(clip.frames.iter().map(|&v| real::<T>(v as f64)));
        frames += clip.n;
    }
    Tensor::new(vec![frames, c, h, w], data)
}

/// Encoder output for a frame batch.
pub struct Encoded {
    /// `[N, d_f]` per-frame features.
    pub features: Var,
    /// `[N, d_f, H/4, W/4]` post-activation maps of the last convolution.
    pub maps: Var,
}

/// Maps each frame independently to a feature vector: three rounds of
/// conv3×3 → GELU → 2×2 average pool, then a global average.
pub fn encode_frames<T: Real>(tape: &mut Tape<T>, p: &Bound, frames: Var) -> Result<Encoded> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] % 8 != 0 || shape[3] % 8 != 0 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::dim(format!("encoder expects [N, 3, H, W] with H, W multiples of 8, got {shape:?}")));
    }
    let mut x = frames;
    let mut maps = x;
    for name in CONVS {
        let conv = tape.conv2d(x, p.get(&format!("encoder.{name}.weight"))?, Some(p.get(&format!("encoder.{name}.bias"))?), 1, 1)?;
        maps = tape.gelu(conv)?;
        x = tape.avg_pool2d(maps, 2)?;
    }
    Ok(Encoded { features: tape.spatial_mean(x)?, maps })
}

/// `z_0[i] = W f_i + pos[i mod seq]` for sequences of length `seq`.
pub fn embed_tokens<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, features: Var, seq: usize) -> Result<Var> {
    if seq == 0 || seq > cfg.clip_len {
        return Err(Error::dim(format!("sequence length {seq} exceeds the {} learned positions", cfg.clip_len)));
    }
    let rows = tape.shape(features)[0];
    if rows % seq != 0 {
        return Err(Error::dim(format!("{rows} tokens do not split into sequences of {seq}")));
    }
    let proj = tape.linear(features, p.get("embedder.proj.weight")?, None)?;
    let pos = tape.gather_rows(p.get("embedder.pos")?, (0..rows).map(|r| r % seq).collect())?;
    tape.add(proj, pos)
}

/// Pre-LN blocks: `z += MSA(LN(z))`, then `z += MLP(LN(z))`.
pub fn transformer_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, z0: Var, seq: usize) -> Result<Var> {
    let eps = real::<T>(cfg.ln_eps);
    let mut z = z0;
    for k in 0..cfg.depth {
        let b = format!("transformer.block{k:02}");
        let g = |n: &str| p.get(&format!("{b}.{n}"));
        let h = tape.layer_norm(z, g("ln1.gamma")?, g("ln1.beta")?, eps)?;
        let q = tape.linear(h, g("attn.q.weight")?, Some(g("attn.q.bias")?))?;
        let kk = tape.linear(h, g("attn.k.weight")?, Some(g("attn.k.bias")?))?;
        let v = tape.linear(h, g("attn.v.weight")?, Some(g("attn.v.bias")?))?;
        let a = tape.attention(q, kk, v, cfg.heads, seq)?;
        let o = tape.linear(a, g("attn.o.weight")?, Some(g("attn.o.bias")?))?;
        z = tape.add(z, o)?;
        let h = tape.layer_norm(z, g("ln2.gamma")?, g("ln2.beta")?, eps)?;
        let h = tape.linear(h, g("mlp.fc1.weight")?, Some(g("mlp.fc1.bias")?))?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, g("mlp.fc2.weight")?, Some(g("mlp.fc2.bias")?))?;
        z = tape.add(z, h)?;
    }
    Ok(z)
}

/// Mean over each sequence's tokens: `[B·seq, d] -> [B, d]`.
pub fn pool_representation<T: Real>(tape: &mut Tape<T>, tokens: Var, seq: usize) -> Result<Var> {
    tape.segment_mean(tokens, seq)
}

/// Full representation of a frame batch.
pub struct Representation {
    pub encoded: Encoded,
    pub tokens: Var,
    pub pooled: Var,
}

pub fn represent<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, frames: Var, seq: usize) -> Result<Representation> {
    let encoded = encode_frames(tape, p, frames)?;
    let z0 = embed_tokens(tape, p, cfg, encoded.features, seq)?;
    let tokens = transformer_forward(tape, p, cfg, z0, seq)?;
    let pooled = pool_representation(tape, tokens, seq)?;
    Ok(Representation { encoded, tokens, pooled })
}

/// Pooled representations `[clips, d]` without gradients.
pub fn embed_clips(params: &ParamStore<f32>, cfg: &ModelConfig, clips: &[&FrameClip]) -> Result<Tensor<f32>> {
    let seq = clips.first().map(|c| c.n).ok_or_else(|| Error::dim("no clips to embed"))?;
    if clips.iter().any(|c| c.n != seq) {
        return Err(Error::dim("clips in one batch must share a length"));
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let frames = tape.constant(frames_tensor(clips)?);
    let rep = represent(&mut tape, &bound, cfg, frames, seq)?;
    Ok(tape.value(rep.pooled).clone())
}
