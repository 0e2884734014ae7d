use std::path::Path;
use std::process::{Command, Output};

fn wedl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wedl")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, mode: &str, extra: &str) -> String {
    let path = dir.join(format!("{}.json", mode.replace(':', "_")));
    let text = format!(
        r#"{{
  "dataset": {{"synthetic": {{"classes": 8, "per_class": 8, "dim": 6, "sep": 3.0, "warp": "tanh-mix"}}}},
  "mode": "{mode}",
  "seed": 1,
  "model": {{"embed_dim": 4}},
  "train": {{"epochs": 2, "batch_classes": 3, "batch_per_class": 3}},
  "compressor": {{"epochs": 2, "batch_classes": 3, "batch_per_class": 3}}{extra}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_eval_compress_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let cfg = write_config(dir.path(), "WEDL", "");
    let stdout = ok(&wedl(&["train", "--config", &cfg, "--out", out_s]));
    assert!(stdout.contains("config hash"));
    for f in ["report.json", "curves.csv", "metrics.json", "model.ckpt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read(out.join("model.ckpt")).unwrap().starts_with(b"WEDL"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    ok(&wedl(&["eval", "--out", out_s]));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["metrics"], report["metrics"]);
    assert_eq!(eval["config_hash"], report["config_hash"]);
    assert!(eval["compressed"].is_null());

    ok(&wedl(&["compress", "--out", out_s]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["compression"]["metrics"]["nmi"].is_number());
    ok(&wedl(&["eval", "--out", out_s]));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["compressed"], report["compression"]["metrics"]);
}

#[test]
fn seed_flag_overrides_config_and_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "baseline:triplet", "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&wedl(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]));
    ok(&wedl(&["train", "--config", &cfg, "--seed", "99", "--out", b.to_str().unwrap()]));
    let hash = |d: &Path| {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        (v["config_hash"].as_str().unwrap().to_string(), v["config"]["seed"].as_u64().unwrap())
    };
    let (ha, sa) = hash(&a);
    let (hb, sb) = hash(&b);
    assert_eq!((sa, sb), (1, 99));
    assert_ne!(ha, hb);
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "WEL", r#", "compress": true"#);
    let text = std::fs::read_to_string(&cfg).unwrap().replace(r#""embed_dim": 4"#, r#""embed_dim": 0"#);
    std::fs::write(&cfg, text).unwrap();
    let out = wedl(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("embed_dim"), "{err}");
    assert!(err.contains("compress requires"), "{err}");
}

#[test]
fn synth_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let stdout = ok(&wedl(&[
        "synth", "--classes", "4", "--per-class", "3", "--dim", "2", "--warp", "tanh-mix", "--out", out,
    ]));
    assert!(stdout.contains("12 samples"));
    let text = std::fs::read_to_string(dir.path().join("features.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "f0,f1,label");
    assert_eq!(text.lines().count(), 13);

    ok(&wedl(&["synth", "--format", "bin", "--out", out]));
    assert!(std::fs::read(dir.path().join("features.bin")).unwrap().starts_with(b"FSTO"));
}

#[test]
fn file_dataset_trains_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&wedl(&["synth", "--classes", "8", "--per-class", "6", "--dim", "5", "--out", out]));
    let cfg = dir.path().join("file.json");
    let data = dir.path().join("features.csv");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"dataset": {{"file": {{"path": {:?}}}}}, "mode": "baseline:binomial", "seed": 3,
                "model": {{"embed_dim": 4}}, "train": {{"epochs": 1, "batch_classes": 2, "batch_per_class": 2}}}}"#,
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(&wedl(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]));
    assert!(run.join("report.json").is_file());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&wedl(&["gradcheck", "--instances", "3", "--out", dir.path().to_str().unwrap()]));
    assert!(!stdout.contains("FAIL"));
    assert!(stdout.contains("objective:WEDL"));
    assert!(dir.path().join("gradcheck.json").is_file());
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = wedl(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.ckpt"));
}
