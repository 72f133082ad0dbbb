use std::path::Path;
use std::process::{Command, Output};

fn seqdedup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqdedup"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        "# tiny run\nseed = 9\nmodel.d_l = 4\nmodel.d_m = 8\nmodel.d_r = 4\nmodel.d_att = 4\n\
         stage1.epochs = 1\nstage2.epochs = 1\n",
    )
    .unwrap();
    path
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "stage1.epochs = 3\nstage1.warmup = 2\n").unwrap();
    let out = seqdedup(&["gen-data", "--config", s(&cfg), "--out", s(dir.path()), "--scenes", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1.warmup"));
}

#[test]
fn invalid_value_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "stage2.pos_weight = 0.5\n").unwrap();
    let out = seqdedup(&["gen-data", "--config", s(&cfg), "--out", s(dir.path()), "--scenes", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage2.pos_weight"));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    assert_eq!(seqdedup(&["train", "--stage", "III"]).status.code(), Some(2));
    assert_eq!(seqdedup(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_data_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = seqdedup(&["oracle-table", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_workflow_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let model = dir.path().join("model");

    let out = seqdedup(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--scenes", "12"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scenes.jsonl", "split.json", "config.resolved", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let resolved = std::fs::read_to_string(data.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 9"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 9);

    let out = seqdedup(&["train", "--data", s(&data), "--stage", "II", "--config", s(&cfg), "--out", s(&model)]);
    assert_eq!(out.status.code(), Some(2));

    let out = seqdedup(&["train", "--data", s(&data), "--stage", "I", "--config", s(&cfg), "--out", s(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s1 = model.join("stage1.ckpt");
    let out = seqdedup(&[
        "train", "--data", s(&data), "--stage", "II", "--config", s(&cfg), "--out", s(&model),
        "--stage1-ckpt", s(&s1),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s2 = model.join("stage2.ckpt");
    let loss = std::fs::read_to_string(model.join("loss_stage2.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);

    // Checkpoints given in the wrong order are rejected.
    let eval_dir = dir.path().join("eval");
    let out = seqdedup(&[
        "eval", "--data", s(&data), "--method", "model", "--ckpt", s(&s2), "--ckpt", s(&s1),
        "--config", s(&cfg), "--out", s(&eval_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = seqdedup(&[
        "eval", "--data", s(&data), "--method", "model", "--ckpt", s(&s1), "--ckpt", s(&s2),
        "--config", s(&cfg), "--out", s(&eval_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].split(',').count(), 15);
    assert!(rows[1].starts_with("model,"));

    let out = seqdedup(&["eval", "--data", s(&data), "--method", "model", "--out", s(&eval_dir)]);
    assert_eq!(out.status.code(), Some(2));

    let table_dir = dir.path().join("table");
    let out = seqdedup(&["oracle-table", "--data", s(&data), "--config", s(&cfg), "--out", s(&table_dir)]);
    assert!(out.status.success());
    let table = std::fs::read_to_string(table_dir.join("oracle_table.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["no-removal", "nms", "score-oracle", "iou-oracle"]);

    let svg = dir.path().join("scene.svg");
    let out = seqdedup(&["render", "--data", s(&data), "--scene", "3", "--method", "softnms", "--out", s(&svg)]);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().contains("class=\"gt\""));
    let out = seqdedup(&["render", "--data", s(&data), "--scene", "12", "--method", "nms", "--out", s(&svg)]);
    assert_eq!(out.status.code(), Some(1));
}
