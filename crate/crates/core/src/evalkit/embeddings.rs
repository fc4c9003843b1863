use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::detector::{embed_many, prediction_clips};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::videodata::{CorpusEntry, ForgeryKind, Label};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub rows: usize,
    pub dim: usize,
    pub dtype: String,
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub kinds: Vec<ForgeryKind>,
}

/// One pooled representation per video, averaged over `clips` seeded clips.
pub fn export_embeddings(
    videos: &[&CorpusEntry],
    params: &ParamStore<f32>,
    model: &ModelConfig,
    clips: usize,
    seed: u64,
) -> Result<(EmbeddingHeader, Vec<Vec<f32>>)> {
    let mut all = Vec::new();
    for v in videos {
        all.extend(prediction_clips(&v.video, &v.id, model, clips, seed)?);
    }
    let reps = embed_many(params, model, &all)?;
    let rows: Vec<Vec<f32>> = reps
        .chunks(clips.max(1))
        .map(|group| {
            let mut mean = vec![0f32; model.d_model];
            for r in group {
                mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v / group.len() as f32);
            }
            mean
        })
        .collect();
    let header = EmbeddingHeader {
        rows: rows.len(),
        dim: model.d_model,
        dtype: "f32le".into(),
        ids: videos.iter().map(|v| v.id.clone()).collect(),
        labels: videos.iter().map(|v| v.label).collect(),
        kinds: videos.iter().map(|v| v.kind).collect(),
    };
    Ok((header, rows))
}

/// Writes `<stem>.json` and `<stem>.bin` (row-major f32le).
pub fn write_embeddings(dir: &Path, stem: &str, header: &EmbeddingHeader, rows: &[Vec<f32>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_vec_pretty(header)?).map_err(|e| Error::io(&json, e))?;
    let bin = dir.join(format!("{stem}.bin"));
    let bytes: Vec<u8> = rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

pub fn read_embeddings(dir: &Path, stem: &str) -> Result<(EmbeddingHeader, Vec<Vec<f32>>)> {
    let json = dir.join(format!("{stem}.json"));
    let header: EmbeddingHeader = serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != header.rows * header.dim * 4 {
        return Err(Error::Validation(format!("{}: size does not match {}x{}", bin.display(), header.rows, header.dim)));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let rows = values.chunks(header.dim.max(1)).map(<[f32]>::to_vec).collect();
    Ok((header, rows))
}
