use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, auc, spearman};
use super::report::{kind_row, EvalReport, ReportRow, RobustnessColumn, RobustnessTable};
use super::CamSource;
use crate::backbone::{init_backbone, ModelConfig};
use crate::detector::{embed_many, finetune, prediction_clips, score_representations, FinetuneConfig, Prediction};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::rng::derive_seed;
use crate::ssl::{pretrain, SslConfig};
use crate::videodata::{
    apply_perturbation, Corpus, CorpusEntry, ForgeryKind, Label, PerturbationKind, PerturbationSpec, SeveritySchedule, Split,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub clips_per_video: usize,
    pub threshold: f64,
    /// Forgery kinds the head is trained on in held-out evaluations.
    pub train_kinds: Vec<ForgeryKind>,
    /// Forgery kinds scored in held-out evaluations.
    pub test_kinds: Vec<ForgeryKind>,
    pub cam_source: CamSource,
    pub perturbations: SeveritySchedule,
    pub data_fractions: Vec<f64>,
    /// Also evaluate a randomly initialized, never pretrained backbone.
    pub with_scratch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            clips_per_video: 3,
            threshold: 0.5,
            train_kinds: vec![ForgeryKind::RegionSplice, ForgeryKind::BlendBoundary],
            test_kinds: vec![ForgeryKind::TemporalJitter, ForgeryKind::PerFrameResample],
            cam_source: CamSource::Encoder,
            perturbations: SeveritySchedule::default(),
            data_fractions: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            with_scratch: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips_per_video == 0 {
            return Err(Error::Validation("eval config: clips_per_video must be positive".into()));
        }
        if self.train_kinds.contains(&ForgeryKind::None) || self.test_kinds.contains(&ForgeryKind::None) {
            return Err(Error::Validation("eval config: `none` is not a forgery kind".into()));
        }
        if self.data_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Validation("eval config: data fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything a protocol run needs besides the models under test.
pub struct Experiment<'a> {
    pub corpus: &'a Corpus,
    pub model: &'a ModelConfig,
    pub ssl: &'a SslConfig,
    pub finetune: &'a FinetuneConfig,
    pub eval: &'a EvalConfig,
    pub seed: u64,
}

/// Scores of one evaluated fold.
pub struct FoldResult {
    pub params: ParamStore<f32>,
    pub predictions: Vec<Prediction>,
    pub labels: Vec<Label>,
    pub kinds: Vec<ForgeryKind>,
}

impl FoldResult {
    /// AUC and ACC over real test videos plus fakes of `kind`.
    pub fn kind_metrics(&self, kind: ForgeryKind, threshold: f64) -> Result<(f64, f64)> {
        let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == Label::Real || self.kinds[i] == kind).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| self.predictions[i].score).collect();
        let labels: Vec<Label> = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((auc(&scores, &labels)?, accuracy(&scores, &labels, threshold)?))
    }

    pub fn overall_metrics(&self, threshold: f64) -> Result<(f64, f64)> {
        let scores: Vec<f64> = self.predictions.iter().map(|p| p.score).collect();
        Ok((auc(&scores, &self.labels)?, accuracy(&scores, &self.labels, threshold)?))
    }
}

impl Experiment<'_> {
    pub fn pretrain_videos(&self) -> Vec<&CorpusEntry> {
        self.corpus.split(Split::Pretrain).collect()
    }

    /// A random, never pretrained backbone with the same initialization a
    /// pretraining run starts from.
    pub fn scratch(&self) -> ParamStore<f32> {
        init_backbone(self.model, self.seed)
    }

    /// Pretrains on the first `fraction` of the pretraining videos. Fraction 0
    /// returns the scratch backbone without pretraining.
    pub fn pretrained(&self, fraction: f64, ssl: &SslConfig) -> Result<ParamStore<f32>> {
        let videos = self.pretrain_videos();
        let count = (videos.len() as f64 * fraction).round() as usize;
        if count == 0 {
            return Ok(self.scratch());
        }
        Ok(pretrain(&videos[..count], self.model, ssl, self.seed, |_, _| Ok(()))?.params)
    }

    /// Finetunes a head on real train videos plus `train_kinds`, then scores
    /// real test videos plus `test_kinds`.
    pub fn fold(&self, backbone: &ParamStore<f32>, train_kinds: &[ForgeryKind], test_kinds: &[ForgeryKind]) -> Result<FoldResult> {
        let train = self.corpus.select(Split::Train, train_kinds);
        check_classes(&train, "train")?;
        let params = finetune(&train, backbone, self.model, self.finetune, self.seed)?.params;
        let test = self.corpus.select(Split::Test, test_kinds);
        check_classes(&test, "test")?;
        let predictions = crate::detector::predict_videos(
            &test,
            &params,
            self.model,
            self.eval.clips_per_video,
            self.eval.threshold,
            self.seed,
        )?;
        Ok(FoldResult {
            params,
            predictions,
            labels: test.iter().map(|v| v.label).collect(),
            kinds: test.iter().map(|v| v.kind).collect(),
        })
    }
}

fn check_classes(videos: &[&CorpusEntry], split: &str) -> Result<()> {
    let fakes = videos.iter().filter(|v| v.label == Label::Fake).count();
    if fakes == 0 || fakes == videos.len() {
        return Err(Error::Validation(format!("{split} selection needs both real and fake videos")));
    }
    Ok(())
}

fn config_snapshot(exp: &Experiment) -> serde_json::Value {
    serde_json::json!({
        "model": exp.model,
        "ssl": exp.ssl,
        "finetune": exp.finetune,
        "eval": exp.eval,
    })
}

/// Trains on `train_kinds` and reports one row per held-out kind for each variant.
pub fn run_held_out(
    exp: &Experiment,
    variants: &[(&str, &ParamStore<f32>)],
    train_kinds: &[ForgeryKind],
    test_kinds: &[ForgeryKind],
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for (name, backbone) in variants {
        let fold = exp.fold(backbone, train_kinds, test_kinds)?;
        for &kind in test_kinds {
            let (a, c) = fold.kind_metrics(kind, exp.eval.threshold)?;
            rows.push(kind_row(name, kind, a, c));
        }
    }
    Ok(EvalReport::new("held-out", exp.seed, config_snapshot(exp), rows))
}

/// Leave-one-kind-out: for each kind, train on the others and score it.
pub fn run_cross_forgery(exp: &Experiment, variants: &[(&str, &ParamStore<f32>)]) -> Result<EvalReport> {
    let kinds: Vec<ForgeryKind> =
        ForgeryKind::FAKES.into_iter().filter(|k| exp.corpus.split(Split::Test).any(|e| e.kind == *k)).collect();
    if kinds.len() < 2 {
        return Err(Error::Validation(format!("cross-forgery evaluation needs at least 2 forgery kinds, found {}", kinds.len())));
    }
    let mut rows = Vec::new();
    for (name, backbone) in variants {
        for &held in &kinds {
            let train: Vec<ForgeryKind> = kinds.iter().copied().filter(|&k| k != held).collect();
            let fold = exp.fold(backbone, &train, &[held])?;
            let (a, c) = fold.kind_metrics(held, exp.eval.threshold)?;
            rows.push(kind_row(name, held, a, c));
        }
    }
    Ok(EvalReport::new("cross-forgery", exp.seed, config_snapshot(exp), rows))
}

/// Clean and perturbed AUC of finetuned models on every test video.
pub fn run_robustness(exp: &Experiment, models: &[(&str, &ParamStore<f32>)]) -> Result<EvalReport> {
    let test: Vec<&CorpusEntry> = exp.corpus.split(Split::Test).collect();
    check_classes(&test, "test")?;
    let labels: Vec<Label> = test.iter().map(|v| v.label).collect();
    let k = exp.eval.clips_per_video;
    let mut clips = Vec::with_capacity(test.len() * k);
    for v in &test {
        clips.extend(prediction_clips(&v.video, &v.id, exp.model, k, exp.seed)?);
    }
    let video_scores = |params: &ParamStore<f32>, clips: &[crate::videodata::FrameClip]| -> Result<Vec<f64>> {
        let s = score_representations(params, &embed_many(params, exp.model, clips)?)?;
        Ok(s.chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect())
    };
    let schedule = &exp.eval.perturbations;
    let mut rows = Vec::new();
    let mut tables = Vec::new();
    for (name, params) in models {
        let clean_scores = video_scores(params, &clips)?;
        let clean = auc(&clean_scores, &labels)?;
        rows.push(ReportRow {
            variant: name.to_string(),
            name: "clean".into(),
            auc: clean,
            acc: accuracy(&clean_scores, &labels, exp.eval.threshold)?,
            settings: BTreeMap::new(),
        });
        let mut columns = Vec::new();
        for kind in PerturbationKind::ALL {
            let mut aucs = [0.0; 5];
            let mut parameters = [0.0; 5];
            for severity in 1..=5u8 {
                let perturbed = clips
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let seed = derive_seed(exp.seed, &format!("perturb/{}/{severity}/{}/{}", kind.name(), c.source_id, i % k));
                        apply_perturbation(c, &PerturbationSpec { kind, severity, seed }, schedule)
                    })
                    .collect::<Result<Vec<_>>>()?;
                aucs[severity as usize - 1] = auc(&video_scores(params, &perturbed)?, &labels)?;
                parameters[severity as usize - 1] = schedule.parameter(kind, severity)?;
            }
            columns.push(RobustnessColumn { kind, parameters, auc: aucs, mean_auc: aucs.iter().sum::<f64>() / 5.0 });
        }
        tables.push(RobustnessTable::new(name, clean, columns));
    }
    let mut report = EvalReport::new("robustness", exp.seed, config_snapshot(exp), rows);
    report.robustness = tables;
    Ok(report)
}

/// Pretrains on growing fractions of the pretraining videos and evaluates the
/// configured held-out split after each. Fraction 0 never pretrains.
pub fn run_data_scale_ablation(exp: &Experiment, fractions: &[f64]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for &fraction in fractions {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Validation(format!("data fraction {fraction} is outside [0, 1]")));
        }
        let backbone = exp.pretrained(fraction, exp.ssl)?;
        let (a, c) = held_out_means(exp, &backbone)?;
        let mut settings = BTreeMap::new();
        settings.insert("fraction".to_string(), fraction);
        rows.push(ReportRow { variant: "naco".into(), name: format!("fraction={fraction:.1}"), auc: a, acc: c, settings });
    }
    let mut report = EvalReport::new("data-scale", exp.seed, config_snapshot(exp), rows);
    let fr: Vec<f64> = report.rows.iter().map(|r| r.settings["fraction"]).collect();
    let au: Vec<f64> = report.rows.iter().map(|r| r.auc).collect();
    if let Some(rho) = spearman(&fr, &au) {
        report.spearman.insert("naco".into(), rho);
    }
    Ok(report)
}

fn held_out_means(exp: &Experiment, backbone: &ParamStore<f32>) -> Result<(f64, f64)> {
    let fold = exp.fold(backbone, &exp.eval.train_kinds, &exp.eval.test_kinds)?;
    let mut total = (0.0, 0.0);
    for &kind in &exp.eval.test_kinds {
        let (a, c) = fold.kind_metrics(kind, exp.eval.threshold)?;
        total.0 += a;
        total.1 += c;
    }
    let n = exp.eval.test_kinds.len().max(1) as f64;
    Ok((total.0 / n, total.1 / n))
}

/// One pretraining run per `(spm_on, tcm_on)` setting, identical finetuning.
/// Enabled terms keep their configured weights.
pub fn run_module_ablation(exp: &Experiment, settings: &[(bool, bool)]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for &(spm, tcm) in settings {
        if !spm && !tcm {
            return Err(Error::Validation("module ablation needs at least one pretraining loss".into()));
        }
        let ssl = SslConfig {
            lambda_spm: if spm { exp.ssl.lambda_spm } else { 0.0 },
            lambda_tcm: if tcm { exp.ssl.lambda_tcm } else { 0.0 },
            ..exp.ssl.clone()
        };
        let backbone = exp.pretrained(1.0, &ssl)?;
        let (a, c) = held_out_means(exp, &backbone)?;
        let name = match (spm, tcm) {
            (true, false) => "spm",
            (false, true) => "tcm",
            _ => "spm+tcm",
        };
        let mut s = BTreeMap::new();
        s.insert("lambda_spm".to_string(), ssl.lambda_spm);
        s.insert("lambda_tcm".to_string(), ssl.lambda_tcm);
        rows.push(ReportRow { variant: "naco".into(), name: name.into(), auc: a, acc: c, settings: s });
    }
    Ok(EvalReport::new("module-ablation", exp.seed, config_snapshot(exp), rows))
}
