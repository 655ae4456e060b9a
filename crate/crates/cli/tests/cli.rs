use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::{json, Value};

fn ssnas(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssnas"))
        .args(args)
        .current_dir(cwd)
        .env("SSNAS_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&read(path)).unwrap()
}

/// A config small enough for a few seconds per command.
fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "schema_version": 1,
        "dataset": {"per_class": 40, "test_per_class": 6},
        "transfer_dataset": {"classes": 2, "rho": 4.0, "per_class": 30, "test_per_class": 6},
        "network": {"num_cells": 3, "init_channels": 4, "input_side": 8, "embed_dim": 8, "stem_multiplier": 1},
        "search": {"batch_size": 8, "epochs": 1, "arch_lr": 3.0, "arch_weight_decay": 1e-7, "w01_ramp_epochs": 1.0},
        "finetune": {"epochs": 1, "batch_size": 16},
        "checkpoint_every": 1,
        "ablation_runs": 1
    });
    merge(&mut cfg, extra);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

#[test]
fn make_lt_writes_the_decay_plan() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["make-lt", "--rho", "10", "--classes", "10", "--per-class", "500", "--seed", "7", "--out", "lt"];
    ok(&ssnas(&args, dir.path()));
    let plan = read_json(dir.path().join("lt/plan.json"));
    let counts: Vec<u64> = plan["lt_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(counts, vec![387, 299, 232, 179, 139, 107, 83, 64, 50, 38]);
    let manifest = read_json(dir.path().join("lt/manifest.json"));
    assert_eq!(manifest["indices"].as_array().unwrap().len(), counts.iter().sum::<u64>() as usize);

    ok(&ssnas(&["make-lt", "--rho", "1", "--per-class", "50", "--out", "id"], dir.path()));
    let plan = read_json(dir.path().join("id/plan.json"));
    assert_eq!(plan["lt_counts"], plan["original_counts"]);

    let bad = ssnas(&["make-lt", "--rho", "1e9", "--per-class", "10", "--out", "bad"], dir.path());
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unsatisfiable imbalance"));
}

#[test]
fn search_is_reproducible_and_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        ok(&ssnas(&["search", "--config", cfg, "--seed", "7", "--out", out], dir.path()));
        for file in ["genotype.json", "weights.bin", "history.csv", "report.json", "report.md"] {
            assert!(dir.path().join(out).join(file).exists(), "{out}/{file}");
        }
    }
    let a = std::fs::read(dir.path().join("a/genotype.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/genotype.json")).unwrap());
    let report = read_json(dir.path().join("a/report.json"));
    assert!(report["notes"].as_array().unwrap().iter().any(|n| n == "label reads during search: 0"));

    // The snapshot alone reproduces the run.
    std::fs::write(dir.path().join("snap.json"), report["config"].to_string()).unwrap();
    ok(&ssnas(&["search", "--config", "snap.json", "--out", "c"], dir.path()));
    for file in ["genotype.json", "weights.bin"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(file)).unwrap(),
            std::fs::read(dir.path().join("c").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn zero_epoch_search_derives_the_initial_genotype() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    ok(&ssnas(&["search", "--config", cfg.to_str().unwrap(), "--epochs", "0", "--out", "s"], dir.path()));
    assert_eq!(read(dir.path().join("s/history.csv")).lines().count(), 1);
    let g = read_json(dir.path().join("s/genotype.json"));
    // All σ(α) = 0.5 sit below the 0.75 threshold: each node keeps its
    // single best entry, the first source with the first non-zero op.
    let normal = g["normal"].as_array().unwrap();
    assert_eq!(normal.len(), 4);
    assert_eq!(normal[0], json!([0, 2, "skip_connect"]));
}

#[test]
fn divergence_exits_four_and_keeps_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"search": {"divergence_threshold": 1e-9}}));
    let out = ssnas(&["search", "--config", cfg.to_str().unwrap(), "--out", "s"], dir.path());
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at step 0"));
    assert!(dir.path().join("s/weights.bin").exists());
    assert!(dir.path().join("s/history.csv").exists());
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let versioned = small_config(dir.path(), json!({"schema_version": 2}));
    let out = ssnas(&["search", "--config", versioned.to_str().unwrap(), "--out", "s"], dir.path());
    assert_eq!(code(&out), 2);

    std::fs::write(dir.path().join("typo.json"), r#"{"schema_version": 1, "serach": {}}"#).unwrap();
    assert_eq!(code(&ssnas(&["search", "--config", "typo.json"], dir.path())), 2);
    assert_eq!(code(&ssnas(&["search", "--config", "missing.json"], dir.path())), 2);

    let out = Command::new(env!("CARGO_BIN_EXE_ssnas"))
        .args(["make-lt", "--rho", "2", "--out", "t"])
        .current_dir(dir.path())
        .env("SSNAS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_checkpoint_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["finetune", "eval", "transfer", "ablate"] {
        let out = ssnas(&[cmd, "--from", "nowhere", "--out", "x"], dir.path());
        assert_eq!(code(&out), 3, "{cmd}");
    }
}

#[test]
fn finetune_eval_ablate_and_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    ok(&ssnas(&["search", "--config", cfg.to_str().unwrap(), "--out", "s"], dir.path()));

    ok(&ssnas(&["finetune", "--from", "s", "--out", "f"], dir.path()));
    let stored = read_json(dir.path().join("f/report.json"));
    assert_eq!(stored["num_classes"], 10);
    assert!(read(dir.path().join("f/confusion.csv")).starts_with("true\\predicted,0,1,"));

    // Re-evaluation reproduces the stored accuracy exactly.
    ok(&ssnas(&["eval", "--from", "f", "--out", "e"], dir.path()));
    let again = read_json(dir.path().join("e/report.json"));
    assert_eq!(again["metrics"]["accuracy"], stored["metrics"]["accuracy"]);
    assert_eq!(again["metrics"]["confusion"], stored["metrics"]["confusion"]);

    ok(&ssnas(&["ablate", "--from", "s", "--out", "ab"], dir.path()));
    let md = read(dir.path().join("ab/report.md"));
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 6, "{md}");
    assert_eq!(lines[0], "| Method | Error |");
    let methods: Vec<&str> = lines[2..].iter().map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(methods, ["CE", "CE + Logit adj.", "FL", "FL + Logit adj."]);

    ok(&ssnas(&["report", "f/report.json", "--out", "r"], dir.path()));
    let table = read(dir.path().join("r/report.md"));
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("| FL + Logit adj. | 0.0"));
    assert!(dir.path().join("r/report.csv").exists());

    ok(&ssnas(&["transfer", "--from", "s", "--out", "t"], dir.path()));
    let clash = ssnas(&["report", "f/report.json", "t/report.json", "--out", "r2"], dir.path());
    assert_eq!(code(&clash), 2);
    assert_eq!(code(&ssnas(&["report", "nothing.json"], dir.path())), 3);
}

fn write_png_set(dir: &Path, per_class: &[usize], seed: u8) {
    std::fs::create_dir_all(dir).unwrap();
    let mut csv = String::from("filename,label\n");
    for (class, &n) in per_class.iter().enumerate() {
        for i in 0..n {
            let name = format!("c{class}_{i}.png");
            let level = if class == 0 { 40u8 } else { 200u8 };
            let img = image::GrayImage::from_fn(12, 12, |x, y| {
                image::Luma([level.wrapping_add(((x * 7 + y * 3 + i as u32 + seed as u32) % 11) as u8)])
            });
            img.save(dir.join(&name)).unwrap();
            csv.push_str(&format!("{name},{class}\n"));
        }
    }
    std::fs::write(dir.join("labels.csv"), csv).unwrap();
}

#[test]
fn transfer_to_a_two_class_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    ok(&ssnas(&["search", "--config", cfg.to_str().unwrap(), "--out", "s"], dir.path()));
    write_png_set(&dir.path().join("pngs/train"), &[12, 6], 0);
    write_png_set(&dir.path().join("pngs/test"), &[4, 4], 1);
    let target = format!("directory:{}", dir.path().join("pngs").display());
    ok(&ssnas(&["transfer", "--from", "s", "--to", &target, "--out", "t"], dir.path()));
    let metrics = read_json(dir.path().join("t/metrics.json"));
    assert_eq!(metrics["per_class_recall"].as_array().unwrap().len(), 2);
    assert!(metrics["top1_error"].as_f64().unwrap().is_finite());
    let report = read_json(dir.path().join("t/report.json"));
    assert_eq!(report["num_classes"], 2);
}

#[test]
fn default_desk_search_fits_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(&ssnas(&["search", "--seed", "1", "--out", "desk"], dir.path()));
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "default desk search took {secs:.0}s");
    let history = read(dir.path().join("desk/history.csv"));
    assert_eq!(history.lines().count(), 201);
}
