use naco_core::backbone::{embed_clips, init_backbone};
use naco_core::checkpoint::{load_checkpoint, load_namespaces, save_checkpoint};
use naco_core::config::{Profile, RunConfig};
use naco_core::detector::prediction_clips;
use naco_core::evalkit::{
    run_cross_forgery, run_data_scale_ablation, run_held_out, run_module_ablation, run_robustness, Experiment,
};
use naco_core::videodata::{generate_corpus, load_corpus, save_corpus, Corpus, ForgeryKind, PerturbationKind, SeveritySchedule};
use naco_core::Error;

fn tiny() -> (RunConfig, Corpus) {
    let cfg = RunConfig::profile(Profile::Tiny);
    let corpus = generate_corpus(&cfg.data, 3).unwrap();
    (cfg, corpus)
}

fn experiment<'a>(cfg: &'a RunConfig, corpus: &'a Corpus) -> Experiment<'a> {
    Experiment { corpus, model: &cfg.model, ssl: &cfg.ssl, finetune: &cfg.finetune, eval: &cfg.eval, seed: 3 }
}

#[test]
fn saved_corpus_loads_back_unchanged() {
    let (_, corpus) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(load_corpus(&manifest).unwrap(), corpus);
}

#[test]
fn held_out_and_cross_forgery_reports_are_consistent() {
    let (cfg, corpus) = tiny();
    let exp = experiment(&cfg, &corpus);
    let naco = exp.pretrained(1.0, &cfg.ssl).unwrap();
    let scratch = exp.scratch();
    let variants = [("naco", &naco), ("scratch", &scratch)];

    let held = run_held_out(&exp, &variants, &cfg.eval.train_kinds, &cfg.eval.test_kinds).unwrap();
    held.check_consistency(1e-12).unwrap();
    assert_eq!(held.rows.len(), 2 * cfg.eval.test_kinds.len());
    assert_eq!(held.averages.len(), 2);
    assert!(held.row("naco", cfg.eval.test_kinds[0].name()).is_some());

    let cross = run_cross_forgery(&exp, &variants).unwrap();
    cross.check_consistency(1e-12).unwrap();
    assert_eq!(cross.rows.len(), 2 * ForgeryKind::FAKES.len());
    for kind in ForgeryKind::FAKES {
        assert!(cross.row("scratch", kind.name()).is_some(), "{}", kind.name());
    }
}

#[test]
fn robustness_has_every_column_and_identity_is_exact() {
    let (cfg, corpus) = tiny();
    let exp = experiment(&cfg, &corpus);
    let all = ForgeryKind::FAKES;
    let detector = exp.fold(&exp.scratch(), &all, &all).unwrap().params;

    let report = run_robustness(&exp, &[("scratch", &detector)]).unwrap();
    report.check_consistency(1e-12).unwrap();
    let table = &report.robustness[0];
    let kinds: Vec<_> = table.columns.iter().map(|c| c.kind).collect();
    assert_eq!(kinds, PerturbationKind::ALL.to_vec());
    assert_eq!(table.columns[0].parameters, cfg.eval.perturbations.saturation);

    let mut eval = cfg.eval.clone();
    eval.perturbations = SeveritySchedule::identity();
    let exp = Experiment { eval: &eval, ..experiment(&cfg, &corpus) };
    let report = run_robustness(&exp, &[("scratch", &detector)]).unwrap();
    let table = &report.robustness[0];
    for c in &table.columns {
        assert_eq!(c.auc, [table.clean_auc; 5], "{}", c.kind.name());
    }
    assert_eq!(table.average_drop, 0.0);
}

#[test]
fn data_scale_starts_from_scratch_and_reports_correlation() {
    let (cfg, corpus) = tiny();
    let exp = experiment(&cfg, &corpus);
    let report = run_data_scale_ablation(&exp, &[0.0, 0.5, 1.0]).unwrap();
    report.check_consistency(1e-12).unwrap();
    let fractions: Vec<f64> = report.rows.iter().map(|r| r.settings["fraction"]).collect();
    assert_eq!(fractions, [0.0, 0.5, 1.0]);

    let scratch = exp.scratch();
    let held = run_held_out(&exp, &[("naco", &scratch)], &cfg.eval.train_kinds, &cfg.eval.test_kinds).unwrap();
    assert_eq!(report.rows[0].auc, held.average("naco").unwrap().auc);
    assert!(report.spearman.get("naco").is_none_or(|rho| (-1.0..=1.0).contains(rho)));

    assert!(matches!(run_data_scale_ablation(&exp, &[1.5]), Err(Error::Validation(_))));
}

#[test]
fn module_ablation_logs_loss_weights() {
    let (cfg, corpus) = tiny();
    let exp = experiment(&cfg, &corpus);
    let report = run_module_ablation(&exp, &[(true, false), (false, true), (true, true)]).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["spm", "tcm", "spm+tcm"]);
    let weights: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.settings["lambda_spm"], r.settings["lambda_tcm"])).collect();
    assert_eq!(weights, [(cfg.ssl.lambda_spm, 0.0), (0.0, cfg.ssl.lambda_tcm), (cfg.ssl.lambda_spm, cfg.ssl.lambda_tcm)]);
    assert!(matches!(run_module_ablation(&exp, &[(false, false)]), Err(Error::Validation(_))));
}

#[test]
fn paper_profile_keeps_reference_loss_settings() {
    let ssl = RunConfig::profile(Profile::Paper).ssl;
    assert_eq!((ssl.alpha, ssl.tau, ssl.eps, ssl.lambda_spm, ssl.lambda_tcm), (0.5, 0.5, 1e-8, 1.0, 0.5));
    assert_eq!((ssl.optimizer.lr, ssl.optimizer.weight_decay, ssl.batch_size), (5e-4, 1e-4, 64));
}

#[test]
fn pretrained_backbone_survives_a_checkpoint_round_trip() {
    let (cfg, corpus) = tiny();
    let exp = experiment(&cfg, &corpus);
    let trained = exp.pretrained(1.0, &cfg.ssl).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &trained, &cfg, 7).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.step, 7);

    let mut fresh = init_backbone::<f32>(&cfg.model, 99);
    load_namespaces(&mut fresh, &loaded.params, &["encoder", "embedder", "transformer"]).unwrap();
    let v = &corpus.entries[0];
    let clips = prediction_clips(&v.video, &v.id, &cfg.model, 2, 0).unwrap();
    let refs: Vec<_> = clips.iter().collect();
    assert_eq!(embed_clips(&fresh, &cfg.model, &refs).unwrap(), embed_clips(&trained, &cfg.model, &refs).unwrap());
}
