use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_naco");

fn naco(args: &[&str]) -> Output {
    Command::new(BIN).args(["--profile", "tiny"]).args(args).env_remove("NACO_SEED").output().expect("spawn naco")
}

fn ok(args: &[&str]) {
    let out = naco(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data, pretrain and finetune into `root`; returns the manifest path.
fn pipeline(root: &Path) -> PathBuf {
    let manifest = root.join("data/manifest.jsonl");
    ok(&["--out", s(&root.join("data")), "gen-data"]);
    ok(&["--out", s(&root.join("pre")), "pretrain", "--manifest", s(&manifest)]);
    ok(&[
        "--out",
        s(&root.join("ft")),
        "finetune",
        "--manifest",
        s(&manifest),
        "--pretrained",
        s(&root.join("pre/checkpoint")),
    ]);
    manifest
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = pipeline(root);
    ok(&["--out", s(&root.join("ev")), "eval", "--manifest", s(&manifest), "--finetuned", s(&root.join("ft/checkpoint"))]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(root.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "test");
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert!(report["config"]["model"].is_object());
    let predictions = fs::read_to_string(root.join("ev/predictions.jsonl")).unwrap();
    assert_eq!(predictions.lines().count(), 4 + 4 * 2);

    let log = fs::read_to_string(root.join("pre/pretrain_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "loss_total", "loss_spm", "loss_tcm", "lr"] {
        assert!(first.get(key).is_some(), "log lacks {key}");
    }
    for sub in ["data", "pre", "ft", "ev"] {
        let run: serde_json::Value = serde_json::from_slice(&fs::read(root.join(sub).join("run.json")).unwrap()).unwrap();
        assert_eq!(run["config"]["profile"], "tiny");
        assert_eq!(run["seed"], 0);
    }
    let run: serde_json::Value = serde_json::from_slice(&fs::read(root.join("ft/run.json")).unwrap()).unwrap();
    assert_eq!(run["inputs"].as_object().unwrap().len(), 3);

    ok(&["--out", s(&root.join("loc")), "localize", "--manifest", s(&manifest), "--finetuned", s(&root.join("ft/checkpoint"))]);
    let index: serde_json::Value = serde_json::from_slice(&fs::read(root.join("loc/heatmaps/index.json")).unwrap()).unwrap();
    let first = &index[0];
    let pgm = root.join("loc/heatmaps").join(first["video_id"].as_str().unwrap()).join(first["files"][0].as_str().unwrap());
    assert!(fs::read(pgm).unwrap().starts_with(b"P5\n"));

    ok(&["--out", s(&root.join("emb")), "embed", "--manifest", s(&manifest), "--checkpoint", s(&root.join("pre/checkpoint"))]);
    let header: serde_json::Value = serde_json::from_slice(&fs::read(root.join("emb/embeddings.json")).unwrap()).unwrap();
    let rows = header["rows"].as_u64().unwrap() as usize;
    assert_eq!(fs::metadata(root.join("emb/embeddings.bin")).unwrap().len() as usize, rows * header["dim"].as_u64().unwrap() as usize * 4);

    ok(&["--out", s(&root.join("pert")), "perturb", "--manifest", s(&manifest), "--kind", "blur", "--severity", "5"]);
    assert_eq!(
        fs::read_to_string(root.join("pert/manifest.jsonl")).unwrap(),
        fs::read_to_string(&manifest).unwrap()
    );
}

#[test]
fn eval_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = pipeline(root);
    let ft = root.join("ft/checkpoint");
    for out in ["a", "b"] {
        ok(&["--seed", "7", "--out", s(&root.join(out)), "eval", "--manifest", s(&manifest), "--finetuned", s(&ft)]);
    }
    for f in ["report.json", "predictions.jsonl", "run.json"] {
        assert_eq!(fs::read(root.join("a").join(f)).unwrap(), fs::read(root.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fake_in_pretrain_split_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["--out", s(&root.join("data")), "gen-data"]);
    let manifest = root.join("data/manifest.jsonl");
    let text = fs::read_to_string(&manifest).unwrap();
    let bad: Vec<String> = text
        .lines()
        .map(|l| if l.contains("train-temporal-jitter-0000") { l.replace("\"train\"", "\"pretrain\"") } else { l.to_string() })
        .collect();
    fs::write(&manifest, bad.join("\n") + "\n").unwrap();
    let out = naco(&["--out", s(&root.join("pre")), "pretrain", "--manifest", s(&manifest)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.jsonl:"), "{err}");
    assert!(err.contains("fake"), "{err}");
}

#[test]
fn bad_inputs_exit_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("bad.json");
    fs::write(&cfg, r#"{"ssl": {"temperature": 0.1}}"#).unwrap();
    assert_eq!(naco(&["--config", s(&cfg), "--out", s(root), "gen-data"]).status.code(), Some(2));
    assert_eq!(naco(&["--out", s(root), "pretrain", "--manifest", s(&root.join("missing.jsonl"))]).status.code(), Some(2));
    assert_eq!(naco(&["--out", s(root), "--profile", "huge", "gen-data"]).status.code(), Some(2));
    let env = Command::new(BIN)
        .args(["--profile", "tiny", "--out", s(root), "gen-data"])
        .env("NACO_SEED", "-1")
        .output()
        .unwrap();
    assert_eq!(env.status.code(), Some(2));
}

#[test]
fn mismatched_checkpoint_names_the_namespace() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = pipeline(root);
    let cfg = root.join("deeper.json");
    fs::write(&cfg, r#"{"model": {"depth": 3}}"#).unwrap();
    let out = naco(&[
        "--config",
        s(&cfg),
        "--out",
        s(&root.join("ft2")),
        "finetune",
        "--manifest",
        s(&manifest),
        "--pretrained",
        s(&root.join("pre/checkpoint")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`transformer`"));
}

#[test]
fn divergence_exits_with_numeric_status() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["--out", s(&root.join("data")), "gen-data"]);
    let cfg = root.join("explode.json");
    fs::write(&cfg, r#"{"ssl": {"optimizer": {"lr": 1e30}}}"#).unwrap();
    let out = naco(&["--config", s(&cfg), "--out", s(&root.join("pre")), "pretrain", "--manifest", s(&root.join("data/manifest.jsonl"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn env_seed_applies_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run = |env: Option<&str>, flag: Option<&str>, out: &str| {
        let mut cmd = Command::new(BIN);
        cmd.args(["--profile", "tiny", "--out", s(&root.join(out))]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        cmd.arg("gen-data").env_remove("NACO_SEED");
        if let Some(e) = env {
            cmd.env("NACO_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        let v: serde_json::Value = serde_json::from_slice(&fs::read(root.join(out).join("run.json")).unwrap()).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(run(Some("5"), None, "a"), 5);
    assert_eq!(run(Some("5"), Some("9"), "b"), 9);
}
