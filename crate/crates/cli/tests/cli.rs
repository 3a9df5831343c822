use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avsr_core::harness::RunConfig;

fn avsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsr"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("avsr runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_config(dir: &Path) {
    let mut cfg = RunConfig::default();
    cfg.model.visual.frame_size = 16;
    cfg.phases.clusters = vec![8, 12];
    cfg.phases.kmeans_iters = 5;
    cfg.pretrain.steps = 3;
    cfg.finetune.steps = 3;
    fs::write(dir.join("run.toml"), cfg.to_toml()).unwrap();
}

#[test]
fn staged_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    let common = ["--config", "run.toml", "--out-dir", "run"];
    let with = |extra: &[&'static str]| [&common[..], extra].concat();

    ok(&avsr(d, &["synth", "corpus", "--utterances", "6", "--frame-size", "16"]));
    assert!(d.join("corpus/manifest.tsv").is_file());
    assert!(ok(&avsr(d, &with(&["featurize", "--manifest", "corpus/manifest.tsv"]))).contains("featurized 6"));
    assert!(ok(&avsr(d, &with(&["cluster", "--phase", "1"]))).contains("8 clusters"));
    ok(&avsr(d, &with(&["pretrain", "--phase", "1"])));
    ok(&avsr(d, &with(&["finetune"])));

    let decoded = ok(&avsr(d, &with(&["decode"])));
    assert_eq!(decoded.lines().count(), 6);
    assert!(decoded.lines().all(|l| l.contains('\t')));

    let report = ok(&avsr(d, &with(&["evaluate"])));
    let mut lines = report.lines();
    assert!(lines.next().unwrap().starts_with("mode\t"));
    // two modes, clean plus four noise conditions
    assert_eq!(lines.count(), 10);
    assert!(d.join("run/eval/report.tsv").is_file());
}

#[test]
fn pretraining_before_clustering_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    let common = ["--config", "run.toml", "--out-dir", "run"];
    ok(&avsr(d, &["synth", "corpus", "--utterances", "2", "--frame-size", "16"]));
    ok(&avsr(d, &[&common[..], &["featurize", "--manifest", "corpus/manifest.tsv"]].concat()));
    let out = avsr(d, &[&common[..], &["pretrain", "--phase", "1"]].concat());
    assert_eq!(out.status.code(), Some(2));
    let out = avsr(d, &[&common[..], &["cluster", "--phase", "2"]].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let missing = avsr(d, &["--out-dir", "run", "featurize", "--manifest", "nope.tsv"]);
    assert_eq!(missing.status.code(), Some(3));

    fs::write(d.join("bad.toml"), "seed = \"seven\"\n").unwrap();
    let bad = avsr(d, &["--config", "bad.toml", "param-count"]);
    assert_eq!(bad.status.code(), Some(2));

    fs::write(d.join("unknown.toml"), "sede = 3\n").unwrap();
    assert_eq!(avsr(d, &["--config", "unknown.toml", "param-count"]).status.code(), Some(2));
}

#[test]
fn param_count_reports_encoder_and_decoder() {
    let tmp = tempfile::tempdir().unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(&avsr(tmp.path(), &["param-count", "--vocab", "30"]))).unwrap();
    assert!(v["total"].as_u64().unwrap() > 0);
    assert!(v["decoder"].as_u64().unwrap() > 0);

    let paper: serde_json::Value = serde_json::from_str(&ok(&avsr(tmp.path(), &["param-count", "--paper"]))).unwrap();
    let t = paper["transformer+resnet"]["total"].as_u64().unwrap();
    let c = paper["conformer+resnet"]["total"].as_u64().unwrap();
    assert!(c > t);
}
