//! Command implementations behind the `naco` binary. Each command writes its
//! outputs plus a `run.json` recording the resolved config, the seed and a
//! content hash of every input.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use naco_core::backbone::init_backbone;
use naco_core::checkpoint::{load_checkpoint, load_namespaces, save_checkpoint};
use naco_core::config::{Profile, RunConfig, SEED_ENV};
use naco_core::detector::{finetune, predict_videos, prediction_clips, write_predictions};
use naco_core::evalkit::{
    export_embeddings, grad_cam, kind_row, run_cross_forgery, run_data_scale_ablation, run_held_out, run_module_ablation,
    run_robustness, write_embeddings, write_heatmap, EvalReport, Experiment, HeatmapIndex,
};
use naco_core::numerics::ParamStore;
use naco_core::rng::derive_seed;
use naco_core::ssl::{init_decoder, pretrain};
use naco_core::videodata::{
    apply_perturbation, generate_corpus, load_corpus, save_corpus, Corpus, ForgeryKind, Label, PerturbationKind,
    PerturbationSpec, Split, Video,
};
use naco_core::Error;

/// Exit status for invalid input: bad flags, configs, manifests or checkpoints.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status when a computation produced NaN or infinity.
pub const EXIT_NON_FINITE: i32 = 3;

const BACKBONE: [&str; 3] = ["encoder", "embedder", "transformer"];

#[derive(Debug, Parser)]
#[command(name = "naco", version, about = "Natural-consistency pretraining and forgery detection on synthetic video")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON document overriding profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and the NACO_SEED variable.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Paper)]
    pub profile: ProfileArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Paper,
    Desk,
    Tiny,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Tiny => Profile::Tiny,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus with its manifest.
    GenData,
    /// Self-supervised pretraining on the manifest's pretrain split.
    Pretrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the classification head on the train split over a frozen backbone.
    Finetune {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Pretrained checkpoint; without it the backbone stays at its random initialization.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Score the test split or run an evaluation protocol.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        finetuned: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Protocol::Test)]
        protocol: Protocol,
    },
    /// Write a perturbed copy of a corpus.
    Perturb {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        severity: u8,
    },
    /// Grad-CAM heatmaps for the test split's localized forgeries.
    Localize {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        finetuned: Option<PathBuf>,
        /// At most this many videos.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Export one pooled representation per video.
    Embed {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Score every test video with a finetuned checkpoint.
    Test,
    HeldOut,
    CrossForgery,
    Robustness,
    DataScale,
    ModuleAblation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Pretrain,
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Pretrain => Split::Pretrain,
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Maps an error chain to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } => EXIT_NON_FINITE,
                e if e.is_validation() => EXIT_VALIDATION,
                _ => 1,
            };
        }
        if cause.downcast_ref::<InputError>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    1
}

/// A required input is missing or was not named.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(String);

fn input_err(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

pub fn run(cli: &Cli) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(cli.global.profile.into(), cli.global.config.as_deref(), env_seed.as_deref(), cli.global.seed)?;
    let out = &cli.global.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, out),
        Command::Pretrain { manifest } => cmd_pretrain(&cfg, out, &manifest_path(manifest, &cfg)?),
        Command::Finetune { manifest, pretrained } => {
            let pretrained = pretrained.clone().or_else(|| cfg.paths.pretrained.clone());
            cmd_finetune(&cfg, out, &manifest_path(manifest, &cfg)?, pretrained.as_deref())
        }
        Command::Eval { manifest, pretrained, finetuned, protocol } => {
            let pretrained = pretrained.clone().or_else(|| cfg.paths.pretrained.clone());
            let finetuned = finetuned.clone().or_else(|| cfg.paths.finetuned.clone());
            cmd_eval(&cfg, out, &manifest_path(manifest, &cfg)?, *protocol, pretrained.as_deref(), finetuned.as_deref())
        }
        Command::Perturb { manifest, kind, severity } => {
            cmd_perturb(&cfg, out, &manifest_path(manifest, &cfg)?, kind, *severity)
        }
        Command::Localize { manifest, finetuned, limit } => {
            let finetuned = finetuned.clone().or_else(|| cfg.paths.finetuned.clone());
            let finetuned = finetuned.ok_or_else(|| input_err("localize needs --finetuned"))?;
            cmd_localize(&cfg, out, &manifest_path(manifest, &cfg)?, &finetuned, *limit)
        }
        Command::Embed { manifest, checkpoint, split } => {
            cmd_embed(&cfg, out, &manifest_path(manifest, &cfg)?, checkpoint, (*split).into())
        }
    }
}

fn manifest_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let path = flag
        .clone()
        .or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| input_err("no manifest given (use --manifest or paths.manifest)"))?;
    if !path.is_file() {
        return Err(input_err(format!("manifest {} does not exist", path.display())));
    }
    Ok(path)
}

fn checkpoint_dir(path: &Path) -> Result<()> {
    if !path.join(naco_core::checkpoint::MANIFEST_FILE).is_file() {
        return Err(input_err(format!("{} is not a checkpoint directory", path.display())));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    /// Input path → SHA-256 over its content (directories: over sorted relative paths and file bytes).
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

/// SHA-256 of a file, or of a directory tree in sorted order.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(fs::read(path.join(&rel)).with_context(|| format!("reading {rel}"))?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

/// Hashes a manifest together with the video tree next to it.
fn corpus_inputs(manifest: &Path) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    inputs.insert(manifest.display().to_string(), content_hash(manifest)?);
    let videos = manifest.parent().unwrap_or(Path::new(".")).join("videos");
    if videos.is_dir() {
        inputs.insert(videos.display().to_string(), content_hash(&videos)?);
    }
    Ok(inputs)
}

fn write_run(out: &Path, command: &str, cfg: &RunConfig, inputs: BTreeMap<String, String>, outputs: &[&str]) -> Result<()> {
    let run = RunManifest { command, seed: cfg.seed, config: cfg, inputs, outputs: outputs.iter().map(|s| s.to_string()).collect() };
    write_json(&out.join("run.json"), &run)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = generate_corpus(&cfg.data, cfg.seed)?;
    let manifest = save_corpus(&corpus, out)?;
    write_run(out, "gen-data", cfg, BTreeMap::new(), &["manifest.jsonl", "videos/"])?;
    println!("wrote {} videos to {}", corpus.entries.len(), manifest.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, manifest: &Path) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let videos: Vec<_> = corpus.split(Split::Pretrain).collect();
    let periodic = out.join("checkpoints");
    let outcome = pretrain(&videos, &cfg.model, &cfg.ssl, cfg.seed, |step, params| {
        save_checkpoint(&periodic.join(format!("step-{step:06}")), params, cfg, step)
    })?;
    let step = outcome.log.last().map_or(0, |r| r.step);
    save_checkpoint(&out.join("checkpoint"), &outcome.params, cfg, step)?;
    write_jsonl(&out.join("pretrain_log.jsonl"), &outcome.log)?;
    write_run(out, "pretrain", cfg, corpus_inputs(manifest)?, &["checkpoint/", "pretrain_log.jsonl"])?;
    if let Some(last) = outcome.log.last() {
        println!("pretrained {} steps, final loss {:.6} (spm {:.6}, tcm {:.6})", last.step, last.loss_total, last.loss_spm, last.loss_tcm);
    }
    Ok(())
}

/// Backbone (and decoder, when present) from a checkpoint, verified against the model config.
fn load_backbone(cfg: &RunConfig, path: &Path) -> Result<ParamStore<f32>> {
    checkpoint_dir(path)?;
    let ck = load_checkpoint(path)?;
    let mut params = init_backbone::<f32>(&cfg.model, cfg.seed);
    load_namespaces(&mut params, &ck.params, &BACKBONE)?;
    if ck.params.has_namespace("decoder.") {
        params.merge(init_decoder(&cfg.model, cfg.seed));
        load_namespaces(&mut params, &ck.params, &["decoder"])?;
    }
    Ok(params)
}

/// Backbone and head from a finetuned checkpoint.
fn load_detector(cfg: &RunConfig, path: &Path) -> Result<ParamStore<f32>> {
    let mut params = load_backbone(cfg, path)?;
    params.merge(naco_core::detector::init_head(&cfg.model, cfg.seed));
    let ck = load_checkpoint(path)?;
    load_namespaces(&mut params, &ck.params, &["head"])?;
    Ok(params)
}

pub fn cmd_finetune(cfg: &RunConfig, out: &Path, manifest: &Path, pretrained: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let mut inputs = corpus_inputs(manifest)?;
    let backbone = match pretrained {
        Some(p) => {
            let params = load_backbone(cfg, p)?;
            inputs.insert(p.display().to_string(), content_hash(p)?);
            params
        }
        None => init_backbone(&cfg.model, cfg.seed),
    };
    let train = corpus.select(Split::Train, &cfg.eval.train_kinds);
    let outcome = finetune(&train, &backbone, &cfg.model, &cfg.finetune, cfg.seed)?;
    let step = outcome.log.last().map_or(0, |r| r.step);
    save_checkpoint(&out.join("checkpoint"), &outcome.params, cfg, step)?;
    write_jsonl(&out.join("finetune_log.jsonl"), &outcome.log)?;
    write_run(out, "finetune", cfg, inputs, &["checkpoint/", "finetune_log.jsonl"])?;
    if let Some(last) = outcome.log.last() {
        println!("finetuned {} steps on {} videos, final loss {:.6}", last.step, train.len(), last.loss);
    }
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    protocol: Protocol,
    pretrained: Option<&Path>,
    finetuned: Option<&Path>,
) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let mut inputs = corpus_inputs(manifest)?;
    for p in [pretrained, finetuned].into_iter().flatten() {
        checkpoint_dir(p)?;
        inputs.insert(p.display().to_string(), content_hash(p)?);
    }
    let exp = Experiment { corpus: &corpus, model: &cfg.model, ssl: &cfg.ssl, finetune: &cfg.finetune, eval: &cfg.eval, seed: cfg.seed };
    let mut outputs = vec!["report.json"];
    let report = match protocol {
        Protocol::Test => {
            let path = finetuned.ok_or_else(|| input_err("the test protocol needs --finetuned"))?;
            let params = load_detector(cfg, path)?;
            let (report, predictions) = score_test_split(&exp, &params)?;
            write_predictions(&predictions, &out.join("predictions.jsonl"))?;
            outputs.push("predictions.jsonl");
            report
        }
        Protocol::DataScale => run_data_scale_ablation(&exp, &cfg.eval.data_fractions)?,
        Protocol::ModuleAblation => run_module_ablation(&exp, &[(true, false), (false, true), (true, true)])?,
        Protocol::HeldOut | Protocol::CrossForgery | Protocol::Robustness => {
            let naco = match pretrained {
                Some(p) => load_backbone(cfg, p)?,
                None => exp.pretrained(1.0, &cfg.ssl)?,
            };
            let scratch = exp.scratch();
            let mut variants = vec![("naco", &naco)];
            if cfg.eval.with_scratch {
                variants.push(("scratch", &scratch));
            }
            match protocol {
                Protocol::HeldOut => run_held_out(&exp, &variants, &cfg.eval.train_kinds, &cfg.eval.test_kinds)?,
                Protocol::CrossForgery => run_cross_forgery(&exp, &variants)?,
                _ => {
                    // Heads see every forgery kind; only the perturbations are new.
                    let kinds: Vec<ForgeryKind> =
                        ForgeryKind::FAKES.into_iter().filter(|k| corpus.split(Split::Train).any(|e| e.kind == *k)).collect();
                    let trained = variants
                        .iter()
                        .map(|(name, b)| Ok((*name, exp.fold(b, &kinds, &kinds)?.params)))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<(&str, &ParamStore<f32>)> = trained.iter().map(|(n, p)| (*n, p)).collect();
                    run_robustness(&exp, &refs)?
                }
            }
        }
    };
    report.check_consistency(1e-12)?;
    report.write(&out.join("report.json"))?;
    write_run(out, "eval", cfg, inputs, &outputs)?;
    for r in report.averages.iter() {
        println!("{}: mean AUC {:.4}, ACC {:.4}", r.variant, r.auc, r.acc);
    }
    Ok(())
}

/// Predictions for every test video, with one report row per forgery kind present.
pub fn score_test_split(exp: &Experiment, params: &ParamStore<f32>) -> Result<(EvalReport, Vec<naco_core::detector::Prediction>)> {
    let test: Vec<_> = exp.corpus.split(Split::Test).collect();
    let predictions = predict_videos(&test, params, exp.model, exp.eval.clips_per_video, exp.eval.threshold, exp.seed)?;
    let mut rows = Vec::new();
    for kind in ForgeryKind::FAKES {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].label == Label::Real || test[i].kind == kind).collect();
        if idx.iter().all(|&i| test[i].label == Label::Real) {
            continue;
        }
        let scores: Vec<f64> = idx.iter().map(|&i| predictions[i].score).collect();
        let labels: Vec<Label> = idx.iter().map(|&i| test[i].label).collect();
        let a = naco_core::evalkit::auc(&scores, &labels)?;
        let c = naco_core::evalkit::accuracy(&scores, &labels, exp.eval.threshold)?;
        rows.push(kind_row("model", kind, a, c));
    }
    if rows.is_empty() {
        bail!(Error::Validation("the test split has no fake videos".into()));
    }
    let config = serde_json::json!({ "model": exp.model, "eval": exp.eval });
    Ok((EvalReport::new("test", exp.seed, config, rows), predictions))
}

pub fn cmd_perturb(cfg: &RunConfig, out: &Path, manifest: &Path, kind: &str, severity: u8) -> Result<()> {
    let kind: PerturbationKind = serde_json::from_value(serde_json::Value::String(kind.to_string()))
        .map_err(|_| Error::Validation(format!("unknown perturbation `{kind}`")))?;
    let corpus = load_corpus(manifest)?;
    let mut perturbed = Corpus::default();
    for e in &corpus.entries {
        let seed = derive_seed(cfg.seed, &format!("perturb/{}/{severity}/{}", kind.name(), e.id));
        let clip = e.video.as_clip(&e.id);
        let p = apply_perturbation(&clip, &PerturbationSpec { kind, severity, seed }, &cfg.eval.perturbations)?;
        let video = Video::new(e.video.t, e.video.c, e.video.h, e.video.w, p.frames)?;
        perturbed.entries.push(naco_core::videodata::CorpusEntry { video, ..e.clone() });
    }
    save_corpus(&perturbed, out)?;
    write_run(out, "perturb", cfg, corpus_inputs(manifest)?, &["manifest.jsonl", "videos/"])?;
    println!("wrote {} {} (severity {severity}) videos", perturbed.entries.len(), kind.name());
    Ok(())
}

#[derive(Serialize)]
struct LocalizedVideo {
    #[serde(flatten)]
    index: HeatmapIndex,
    clip_offset: usize,
    mean_inside: Option<f64>,
    mean_outside: Option<f64>,
}

pub fn cmd_localize(cfg: &RunConfig, out: &Path, manifest: &Path, finetuned: &Path, limit: Option<usize>) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let mut inputs = corpus_inputs(manifest)?;
    let params = load_detector(cfg, finetuned)?;
    inputs.insert(finetuned.display().to_string(), content_hash(finetuned)?);
    let source = cfg.eval.cam_source;
    if source == naco_core::evalkit::CamSource::Decoder && !params.has_namespace("decoder.") {
        return Err(Error::Checkpoint("decoder saliency needs a checkpoint with decoder parameters".into()).into());
    }
    let dir = out.join("heatmaps");
    let mut index = Vec::new();
    let targets = corpus.split(Split::Test).filter(|e| e.label == Label::Fake && e.region.is_some());
    for e in targets.take(limit.unwrap_or(usize::MAX)) {
        let clip = prediction_clips(&e.video, &e.id, &cfg.model, 1, cfg.seed)?.remove(0);
        let cam = grad_cam(&clip, &params, &cfg.model, source)?;
        let (inside, outside) = match &e.region {
            Some(r) => {
                let (i, o) = cam.inside_outside(r, e.video.h, e.video.w);
                (Some(i), Some(o))
            }
            None => (None, None),
        };
        let entry = write_heatmap(&dir.join(&e.id), &e.id, &cam, source, e.region)?;
        index.push(LocalizedVideo { index: entry, clip_offset: clip.offset, mean_inside: inside, mean_outside: outside });
    }
    if index.is_empty() {
        return Err(Error::Validation("the test split has no forgeries with a known region".into()).into());
    }
    write_json(&dir.join("index.json"), &index)?;
    write_run(out, "localize", cfg, inputs, &["heatmaps/"])?;
    let hits = index.iter().filter(|v| v.mean_inside > v.mean_outside).count();
    println!("{} heatmaps; inside saliency exceeds outside in {hits}", index.len());
    Ok(())
}

pub fn cmd_embed(cfg: &RunConfig, out: &Path, manifest: &Path, checkpoint: &Path, split: Split) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let mut inputs = corpus_inputs(manifest)?;
    let params = load_backbone(cfg, checkpoint)?;
    inputs.insert(checkpoint.display().to_string(), content_hash(checkpoint)?);
    let videos: Vec<_> = corpus.split(split).collect();
    if videos.is_empty() {
        return Err(Error::Validation("no videos in the selected split".into()).into());
    }
    let (header, rows) = export_embeddings(&videos, &params, &cfg.model, cfg.eval.clips_per_video, cfg.seed)?;
    write_embeddings(out, "embeddings", &header, &rows)?;
    write_run(out, "embed", cfg, inputs, &["embeddings.json", "embeddings.bin"])?;
    println!("wrote {} embeddings of dimension {}", header.rows, header.dim);
    Ok(())
}
