use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn semcl(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcl"))
        .args(args)
        .env("SEMCL_DATA_DIR", data_dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/default")
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn run_config(name: &str, dataset: &Path, split: &str) -> serde_json::Value {
    json!({
        "name": name,
        "dataset": dataset,
        "split": split,
        "train": { "batch_size": 64, "epochs": 1, "seed": 1993 }
    })
}

#[test]
fn synth_defaults_reproduce_the_fixture_under_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let o = semcl(&["synth", "--out", "bench"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["dataset.json", "dataset.bin", "embeddings.json", "embeddings.bin", "synth.json"] {
        let made = std::fs::read(tmp.path().join("bench").join(f)).unwrap();
        let committed = std::fs::read(fixture_dir().join(f)).unwrap();
        assert!(made == committed, "{f} differs from the committed fixture");
    }
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("d9f3fd739d36be1afaf41c02ecbde052b347fd21e2dfdcb7e7fde58423a6f028"));
}

#[test]
fn synth_smaller_benchmark_and_bad_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let o = semcl(&["synth", "--out", "small", "--classes", "10", "--clusters", "2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (data, table) = semcl::protocol::load_benchmark(&tmp.path().join("small")).unwrap();
    assert_eq!((data.num_classes(), table.len()), (10, 10));

    let o = semcl(&["synth", "--out", "bad", "--dim", "2", "--clusters", "4"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn run_rejects_a_split_that_does_not_cover_the_classes() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(semcl(&["synth", "--out", "c100", "--classes", "100", "--samples", "4", "--test", "2"], tmp.path()).status.success());
    let cfg = tmp.path().join("bad.json");
    write_json(&cfg, &run_config("bad", &tmp.path().join("c100"), "10x9"));
    let o = semcl(&["run", cfg.to_str().unwrap(), "--out", "runs"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("90") && msg.contains("100"), "{msg}");
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn run_rejects_unknown_config_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value = run_config("typo", &fixture_dir(), "4x5");
    value["train"]["learning_rate"] = json!(0.1);
    let cfg = tmp.path().join("typo.json");
    write_json(&cfg, &value);
    let o = semcl(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn dry_run_resolves_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("dry.json");
    write_json(&cfg, &run_config("dry", &fixture_dir(), "4x5"));
    let o = semcl(&["run", cfg.to_str().unwrap(), "--out", "runs", "--dry-run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(resolved["stream"]["tasks"].as_array().unwrap().len(), 5);
    assert_eq!(resolved["config"]["train"]["lr"], json!(0.01));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn run_writes_reports_and_checkpoints_under_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("one.json");
    write_json(&cfg, &run_config("one", &fixture_dir(), "4x5"));
    let o = semcl(&["run", cfg.to_str().unwrap(), "--out", "runs"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("runs/one");
    for f in ["report.json", "accuracy.csv", "accuracy.svg", "task4/params.json", "task4/report.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let report: semcl::RunReport = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.tasks.len(), 5);
    let expected_avg = report.tasks.iter().map(|t| t.top1).sum::<f64>() / 5.0;
    assert!((report.avg - expected_avg).abs() < 1e-9);
    assert_eq!(report.last, report.tasks[4].top1);

    let params = semcl::cli::load_params(&dir.join("task4/params.json")).unwrap();
    let store = semcl::ExemplarStore::load(&dir.join("task4/store")).unwrap();
    assert_eq!(store.len(), 20 * 20);
    let (data, table) = semcl::protocol::load_benchmark(&fixture_dir()).unwrap();
    let seen: Vec<usize> = (0..20).collect();
    let cfg = semcl::TrainConfig::desk_scale();
    let trainer = semcl::Trainer::new(&data, &table, params.clone(), cfg).unwrap();
    let reloaded = semcl::trainer::evaluate_classes(&params, &data, trainer.class_embeddings(), &seen).unwrap();
    assert_eq!(reloaded.top1, report.last);

    let report_path = dir.join("report.json");
    let svg = tmp.path().join("all.svg");
    let o = semcl(&["report", report_path.to_str().unwrap(), "--svg", svg.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("one"));
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

#[test]
fn ablate_needs_two_entries() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = tmp.path().join("plan.json");
    write_json(&plan, &json!({ "output": "abl", "seeds": [1], "entries": [run_config("only", &fixture_dir(), "4x5")] }));
    let o = semcl(&["ablate", plan.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 2"), "{}", stderr(&o));
}
