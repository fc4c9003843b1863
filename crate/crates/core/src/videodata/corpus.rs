use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    generate_fake_video, generate_real_video, read_manifest, read_video, write_manifest, write_video, DynamicsConfig,
    ForgeryKind, Label, Manifest, ManifestEntry, Rect, Split, Video,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Frames per video.
    pub video_len: usize,
    /// Rendered frame side.
    pub frame_size: usize,
    pub pretrain_real: usize,
    pub train_real: usize,
    /// Fakes per forgery kind in the train split.
    pub train_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
    pub dynamics: DynamicsConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub video: Video,
    pub label: Label,
    pub kind: ForgeryKind,
    pub split: Split,
    pub region: Option<Rect>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

/// Sidecar with generator metadata not carried by the manifest.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoMeta {
    id: String,
    region: Option<Rect>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Entries of `split` that are real or one of `kinds`.
    pub fn select<'a>(&'a self, split: Split, kinds: &'a [ForgeryKind]) -> Vec<&'a CorpusEntry> {
        self.split(split).filter(|e| e.label == Label::Real || kinds.contains(&e.kind)).collect()
    }
}

/// Generates every split. Each fake is derived from its own real source video,
/// which is not itself part of the corpus.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    let mut entries = Vec::new();
    let (t, s) = (cfg.video_len, cfg.frame_size);
    let add_real = |entries: &mut Vec<CorpusEntry>, split: Split, count: usize| -> Result<()> {
        for i in 0..count {
            let id = format!("{}-real-{i:04}", split_name(split));
            let v = generate_real_video(&id, derive_seed(seed, &format!("video/{id}")), t, s, s, &cfg.dynamics)?;
            entries.push(CorpusEntry { id, video: v.video, label: Label::Real, kind: ForgeryKind::None, split, region: None });
        }
        Ok(())
    };
    add_real(&mut entries, Split::Pretrain, cfg.pretrain_real)?;
    add_real(&mut entries, Split::Train, cfg.train_real)?;
    add_real(&mut entries, Split::Test, cfg.test_real)?;
    for (split, count) in [(Split::Train, cfg.train_fake), (Split::Test, cfg.test_fake)] {
        for kind in ForgeryKind::FAKES {
            for i in 0..count {
                let id = format!("{}-{}-{i:04}", split_name(split), kind.name());
                let src = generate_real_video(&id, derive_seed(seed, &format!("source/{id}")), t, s, s, &cfg.dynamics)?;
                let fake = generate_fake_video(&src, kind, derive_seed(seed, &format!("forge/{id}")), &cfg.dynamics)?;
                entries.push(CorpusEntry { id, video: fake.video, label: Label::Fake, kind, split, region: fake.region });
            }
        }
    }
    Ok(Corpus { entries })
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Pretrain => "pretrain",
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Writes `videos/<id>/` directories and `manifest.jsonl` under `root`.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<PathBuf> {
    let mut manifest = Manifest::default();
    for e in &corpus.entries {
        let rel = format!("videos/{}", e.id);
        let dir = root.join(&rel);
        write_video(&dir, &e.video)?;
        let meta_path = dir.join("meta.json");
        let meta = VideoMeta { id: e.id.clone(), region: e.region };
        fs::write(&meta_path, serde_json::to_vec(&meta)?).map_err(|err| Error::io(&meta_path, err))?;
        manifest.entries.push(ManifestEntry { path: rel, label: e.label, forgery_kind: e.kind, split: e.split });
    }
    let path = root.join("manifest.jsonl");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

/// Loads every video a manifest references. Missing videos are validation errors.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let dir = base.join(&e.path);
        if !dir.join("header.json").is_file() {
            return Err(Error::Validation(format!(
                "{}: video `{}` is missing or unreadable",
                manifest_path.display(),
                e.path
            )));
        }
        let video = read_video(&dir)?;
        let meta_path = dir.join("meta.json");
        let (id, region) = if meta_path.is_file() {
            let raw = fs::read(&meta_path).map_err(|err| Error::io(&meta_path, err))?;
            let meta: VideoMeta = serde_json::from_slice(&raw)?;
            (meta.id, meta.region)
        } else {
            (e.path.clone(), None)
        };
        entries.push(CorpusEntry { id, video, label: e.label, kind: e.forgery_kind, split: e.split, region });
    }
    Ok(Corpus { entries })
}
