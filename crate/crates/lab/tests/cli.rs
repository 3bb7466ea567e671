use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmlab::checkpoint::Checkpoint;
use cmlab::config::RunConfig;
use cmlab::io::read_points_csv;
use cmlab_core::consistency::{n_schedule, TrainSchedule};
use serde_json::{json, Value};

fn cmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmlab")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cmlab(args);
    assert!(out.status.success(), "cmlab {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_config(extra: Value) -> Value {
    let mut base = json!({
        "model": { "hidden": [16, 16], "time_embed_dim": 4 },
        "grid": { "n": 12 },
        "schedule": { "total_steps": 40, "s0": 2, "s1": 20 },
        "optimizer": { "kind": "adam", "lr": 1e-3, "batch_size": 16 },
        "train": { "steps": 20, "checkpoint_every": 5 },
        "seed": 11
    });
    merge(&mut base, extra);
    base
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Checkpoints from different run directories differ only in the echoed
/// output directory.
fn same_state(a: &Path, b: &Path) -> bool {
    let mut a = Checkpoint::load(a).unwrap();
    let mut b = Checkpoint::load(b).unwrap();
    for ck in [&mut a, &mut b] {
        let mut cfg = RunConfig::from_json(&ck.config).unwrap();
        cfg.output_dir = PathBuf::new();
        ck.config = cfg.to_json();
    }
    a == b
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

fn train(cmd: &str, config: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![cmd, "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn distill_with_zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(json!({})));
    let run = dir.path().join("run");
    train("distill", &cfg, &run, &["--steps", "0"]);
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap(), "k,n,mu,loss\n");
    let ck = Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.iteration, 0);
    assert_eq!(ck.online, ck.target);
}

#[test]
fn training_logs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(json!({})));
    for cmd in ["distill", "train-ct", "train-score"] {
        let (a, b) = (dir.path().join(format!("{cmd}-a")), dir.path().join(format!("{cmd}-b")));
        train(cmd, &cfg, &a, &[]);
        train(cmd, &cfg, &b, &[]);
        assert!(same_bytes(&a.join("log.csv"), &b.join("log.csv")), "{cmd}");
        assert!(same_state(&a.join("checkpoint.bin"), &b.join("checkpoint.bin")), "{cmd}");
        assert_eq!(fs::read_to_string(a.join("log.csv")).unwrap().lines().count(), 21);
    }
}

#[test]
fn resumed_runs_match_uninterrupted_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(json!({})));
    for cmd in ["distill", "train-ct", "train-score"] {
        let full = dir.path().join(format!("{cmd}-full"));
        let split = dir.path().join(format!("{cmd}-split"));
        train(cmd, &cfg, &full, &[]);
        train(cmd, &cfg, &split, &["--steps", "7"]);
        let ck = split.join("checkpoint.bin");
        train(cmd, &cfg, &split, &["--checkpoint", s(&ck)]);
        assert!(same_bytes(&full.join("log.csv"), &split.join("log.csv")), "{cmd}");
        assert!(same_state(&full.join("checkpoint.bin"), &split.join("checkpoint.bin")), "{cmd}");
    }
}

#[test]
fn resuming_drops_log_rows_past_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(json!({})));
    let full = dir.path().join("full");
    let run = dir.path().join("run");
    train("train-ct", &cfg, &full, &[]);
    train("train-ct", &cfg, &run, &["--steps", "10"]);
    let saved = dir.path().join("at10.bin");
    fs::copy(run.join("checkpoint.bin"), &saved).unwrap();
    // a run that got further before stopping
    train("train-ct", &cfg, &run, &["--steps", "14", "--checkpoint", s(&saved)]);
    train("train-ct", &cfg, &run, &["--checkpoint", s(&saved)]);
    assert!(same_bytes(&full.join("log.csv"), &run.join("log.csv")));
}

#[test]
fn ct_log_follows_the_step_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(json!({})));
    let run = dir.path().join("run");
    train("train-ct", &cfg, &run, &[]);
    let sched = TrainSchedule::new(40, 2, 20, 0.9).unwrap();
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    let mut rows = 0;
    for line in log.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let k: u64 = cols[0].parse().unwrap();
        let n: u32 = cols[1].parse().unwrap();
        let mu: f64 = cols[2].parse().unwrap();
        // ceil(sqrt(k/K ((s1+1)^2 - s0^2) + s0^2) - 1) + 1, recomputed in f64
        let inner = (k as f64 / 40.0 * (21.0f64.powi(2) - 4.0) + 4.0).sqrt();
        let want = ((inner - 1.0).ceil() + 1.0) as u32;
        assert_eq!(n, want, "k = {k}");
        assert_eq!(n, n_schedule(k, &sched));
        assert!((mu - (2.0 * 0.9f64.ln() / n as f64).exp()).abs() < 1e-15);
        rows += 1;
    }
    assert_eq!(rows, 20);
}

#[test]
fn sampling_zero_points_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(json!({})));
    let run = dir.path().join("run");
    train("distill", &cfg, &run, &["--steps", "2"]);
    let out = dir.path().join("samples");
    ok(&["sample", "--checkpoint", s(&run.join("checkpoint.bin")), "--count", "0", "--out", s(&out)]);
    assert_eq!(fs::read_to_string(out.join("samples.csv")).unwrap(), "x0,x1\n");
}

#[test]
fn eval_of_a_file_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(json!({})));
    let run = dir.path().join("run");
    train("distill", &cfg, &run, &["--steps", "2"]);
    let out = dir.path().join("samples");
    ok(&["sample", "--checkpoint", s(&run.join("checkpoint.bin")), "--count", "200", "--out", s(&out)]);
    let csv = out.join("samples.csv");
    ok(&["eval", s(&csv), s(&csv), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["sliced_wasserstein", "mmd_rbf", "energy_distance"] {
        assert_eq!(report[key].as_f64().unwrap(), 0.0, "{key}");
    }
    // the unbiased estimator drops the diagonal, so it is negative here
    assert!(report["mmd_rbf_unbiased"].as_f64().unwrap() < 0.0);
}

#[test]
fn missing_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    for cmd in ["sample", "multistep"] {
        let out = cmlab(&[cmd, "--checkpoint", s(&missing), "--out", s(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
    }
    let out = cmlab(&["edit", "--checkpoint", s(&missing), "--task", "inpaint", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = cmlab(&["distill", "--config", s(&dir.path().join("missing.json")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"grid\": {\"n\": 1}}").unwrap();
    let out = cmlab(&["train-ct", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_3_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(json!({ "optimizer": { "kind": "sgd", "lr": 1e12 } })));
    let run = dir.path().join("run");
    let out = cmlab(&["distill", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    assert!(ck.online.iter().all(|v| v.is_finite()));
}

/// `f(x, t) = m + r(t) (x - m)` with `r(t) = sqrt((v + eps^2) / (v + t^2))`.
fn pushforward(mean: f64, var: f64, m: f64, v: f64, t: f64, eps: f64) -> (f64, f64) {
    let r = ((v + eps * eps) / (v + t * t)).sqrt();
    (m + r * (mean - m), r * r * var)
}

#[test]
fn multistep_on_the_gaussian_oracle_matches_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let (m, v, tau) = ([1.5, -0.5], 0.3, 0.8);
    let cfg = write_config(
        dir.path(),
        &small_config(json!({
            "dataset": { "kind": "gaussian_mixture", "weights": [1.0], "means": [m], "variances": [v] },
            "sampling": { "timepoints": [tau] }
        })),
    );
    ok(&["oracle", "--config", s(&cfg), "--out", s(dir.path())]);
    let count = 40_000;
    ok(&[
        "multistep",
        "--checkpoint",
        s(&dir.path().join("oracle.bin")),
        "--steps",
        "2",
        "--count",
        &count.to_string(),
        "--out",
        s(dir.path()),
    ]);
    let plan: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["timepoints"], json!([tau]));
    let x = read_points_csv(&dir.path().join("samples.csv")).unwrap();
    let (eps, horizon) = (0.002, 80.0);
    let (mean, cov) = (x.mean(), x.covariance());
    for d in 0..2 {
        let (m1, v1) = pushforward(0.0, horizon * horizon, m[d], v, horizon, eps);
        let (m2, v2) = pushforward(m1, v1 + tau * tau - eps * eps, m[d], v, tau, eps);
        let se = (v2 / count as f64).sqrt();
        assert!((mean[d] - m2).abs() < 5.0 * se, "mean {d}: {} vs {m2}", mean[d]);
        let var_se = v2 * (2.0 / count as f64).sqrt();
        assert!((cov[d * 2 + d] - v2).abs() < 5.0 * var_se, "var {d}: {} vs {v2}", cov[d * 2 + d]);
    }
}

#[test]
fn image_editing_keeps_constraints_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &small_config(json!({ "dataset": { "kind": "procedural_images", "size": 4 }, "sampling": { "edit_steps": 4 } })),
    );
    let run = dir.path().join("run");
    let cfg_err = cmlab(&["distill", "--config", s(&cfg), "--out", s(&run), "--steps", "0"]);
    assert!(!cfg_err.status.success(), "image data has no analytic teacher");
    let ck = dir.path().join("ct.bin");
    train("train-ct", &cfg, &run, &["--steps", "2"]);
    fs::copy(run.join("checkpoint.bin"), &ck).unwrap();
    for task in ["inpaint", "colorize", "superres", "sdedit"] {
        let out = dir.path().join(task);
        ok(&["edit", "--checkpoint", s(&ck), "--task", task, "--out", s(&out)]);
        let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("edit.json")).unwrap()).unwrap();
        assert_eq!(summary["violations"], json!(0), "{task}");
        for f in ["output.ppm", "output.cmt", "output.png"] {
            assert!(out.join(f).exists(), "{task} {f}");
        }
    }
    let out = dir.path().join("grid");
    ok(&["sample", "--checkpoint", s(&ck), "--count", "4", "--out", s(&out)]);
    assert!(out.join("samples.ppm").exists());
}

#[test]
fn config_echo_round_trips_through_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &small_config(json!({})));
    let run = dir.path().join("run");
    train("distill", &cfg_path, &run, &["--steps", "1"]);
    let ck = Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    let echo = RunConfig::from_json(&ck.config).unwrap();
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.output_dir = run;
    cfg.train.steps = 1;
    assert_eq!(echo, cfg);
}

#[test]
fn verify_report_matches_the_shipped_schema() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["verify-theory", "--only", "boundary,lemma1", "--out", s(dir.path())]);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify_report.json")).unwrap()).unwrap();
    let schema: Value =
        serde_json::from_str(include_str!("../schema/verify_report.schema.json")).expect("schema parses");
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    assert!(compiled.is_valid(&report));
    let names: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["boundary", "lemma1"]);

    let mut broken = report.clone();
    broken["checks"][0]["criterion"] = json!("one");
    assert!(!compiled.is_valid(&broken));
    let mut broken = report;
    broken["format"] = json!("something-else/1");
    assert!(!compiled.is_valid(&broken));
}

#[test]
fn unknown_checks_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmlab(&["verify-theory", "--only", "theorem9", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
