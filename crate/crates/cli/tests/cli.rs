use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fresco::io::{params_from_text, trace_from_jsonl};
use fresco::metrics::parse_metrics_csv;
use fresco::model::WorldState;

const TINY: &str = r#"
[scenario]
num_mus = 8
num_uavs = 4
slots = 24

[train]
epochs = 20
hidden = 4
batch_size = 32
"#;

fn fresco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fresco"))
        .current_dir(dir)
        .env_remove("FRESCO_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single `<root>/<hash>` directory a command created.
fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn gen_writes_full_scale_snapshot_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fresco(tmp.path(), &["gen", "--scale", "S1", "--seeds", "3", "--out", "a"]);
    let b = fresco(tmp.path(), &["gen", "--scale", "S1", "--seeds", "3", "--out", "b"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(b.status.success());
    let da = only_run_dir(&tmp.path().join("a"));
    let db = only_run_dir(&tmp.path().join("b"));
    assert_eq!(da.file_name(), db.file_name());
    let sa = fs::read(da.join("scenario_3.snap")).unwrap();
    assert_eq!(sa, fs::read(db.join("scenario_3.snap")).unwrap());
    let w = WorldState::from_snapshot(std::str::from_utf8(&sa).unwrap()).unwrap();
    assert_eq!(w.missions.len(), 48);
    assert_eq!(w.uavs.len(), 12);
    assert!(da.join("manifest.json").exists());
}

#[test]
fn bad_config_key_is_a_named_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[energy]\nkappa_q = 1.0\n").unwrap();
    let o = fresco(tmp.path(), &["gen", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kappa_q"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fresco(tmp.path(), &["sweep", "--policy", "nope"]).status.code(), Some(1));
    assert_eq!(fresco(tmp.path(), &["run", "--policy", "reactive", "--seeds", "9-3"]).status.code(), Some(1));
    assert_eq!(fresco(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fresco(tmp.path(), &["train", "--seeds", ""]).status.code(), Some(1));
    assert_eq!(fresco(tmp.path(), &["run", "--policy", "reactive", "--params", "missing.txt"]).status.code(), Some(2));
    assert_eq!(fresco(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn train_then_run_fresco() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let t1 = fresco(tmp.path(), &["train", "--config", cfg, "--seeds", "1-2", "--out", "t1"]);
    assert!(t1.status.success(), "{}", stderr(&t1));
    let t2 = fresco(tmp.path(), &["train", "--config", cfg, "--seeds", "1-2", "--out", "t2"]);
    assert!(t2.status.success());
    let d1 = only_run_dir(&tmp.path().join("t1"));
    let d2 = only_run_dir(&tmp.path().join("t2"));
    let params = fs::read_to_string(d1.join("params/lstm.txt")).unwrap();
    assert_eq!(params, fs::read_to_string(d2.join("params/lstm.txt")).unwrap());
    assert_eq!(params_from_text(&params).unwrap().hidden, 4);
    let loss = fs::read_to_string(d1.join("params/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21, "header plus one row per epoch");

    let missing = fresco(tmp.path(), &["run", "--config", cfg, "--policy", "fresco", "--out", "r"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("--params"));

    let p = d1.join("params/lstm.txt");
    let r = fresco(tmp.path(), &["run", "--config", cfg, "--policy", "fresco", "--params", p.to_str().unwrap(), "--out", "r"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let rows = parse_metrics_csv(&fs::read_to_string(only_run_dir(&tmp.path().join("r")).join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].policy.as_str(), rows[0].scale.as_str()), ("fresco", "8x4"));
}

#[test]
fn labels_are_cached_as_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let o = fresco(tmp.path(), &["labels", "--config", cfg.to_str().unwrap(), "--seeds", "1", "--out", "l"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(only_run_dir(&tmp.path().join("l")).join("labels.csv")).unwrap();
    let data = fresco::io::dataset_from_csv(&text).unwrap();
    assert!(!data.samples.is_empty());
    assert!(data.samples.iter().all(|s| s.x.len() == 6));
}

#[test]
fn reactive_run_traces_every_slot() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fresco(tmp.path(), &["run", "--policy", "reactive", "--scale", "S1", "--seeds", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(&tmp.path().join("out"));
    let trace = trace_from_jsonl(&fs::read_to_string(dir.join("traces/reactive_S1_4.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.first().unwrap().t, 0);
    assert_eq!(trace.last().unwrap().t, 79);
    let rows = parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!((rows[0].peo_kj, rows[0].asw), (0.0, 0.0));
}

#[test]
fn sweep_is_deterministic_resumable_and_aggregated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let args = |out: &'static str| {
        vec!["sweep", "--config", cfg, "--policy", "reactive,best_channel", "--scale", "S1", "--seeds", "1-3", "--workers", "2", "--out", out]
    };
    let a = fresco(tmp.path(), &args("a"));
    assert!(a.status.success(), "{}", stderr(&a));
    let b = fresco(tmp.path(), &args("b"));
    assert!(b.status.success());
    let da = only_run_dir(&tmp.path().join("a"));
    let db = only_run_dir(&tmp.path().join("b"));
    let metrics = fs::read_to_string(da.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(db.join("metrics.csv")).unwrap());
    assert_eq!(parse_metrics_csv(&metrics).unwrap().len(), 6);
    for stem in ["reactive_S1_2", "best_channel_S1_3"] {
        let p = format!("traces/{stem}.jsonl");
        assert_eq!(fs::read(da.join(&p)).unwrap(), fs::read(db.join(&p)).unwrap());
    }
    let summary = fs::read_to_string(da.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    // resume keeps completed rows untouched and refills a missing one
    fs::remove_file(da.join("runs/reactive_S1_2.csv")).unwrap();
    fs::write(da.join("runs/reactive_S1_1.csv"), "policy,scale,seed,scr,aid_s,tcr,trr,acstr,fr,adt_ms,peo_kj,asw,aid_defined\nreactive,S1,1,0.5,0,1,1,1,0,0,0,0,0\n").unwrap();
    let mut resumed = args("a");
    resumed.push("--resume");
    let r = fresco(tmp.path(), &resumed);
    assert!(r.status.success(), "{}", stderr(&r));
    let rows = parse_metrics_csv(&fs::read_to_string(da.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().find(|r| r.policy == "reactive" && r.seed == 1).unwrap().scr, 0.5);
    assert!(da.join("runs/reactive_S1_2.csv").exists());
}

#[test]
fn single_seed_sweep_has_zero_spread() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let o = fresco(tmp.path(), &["sweep", "--config", cfg.to_str().unwrap(), "--policy", "random", "--scale", "S1", "--seeds", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(only_run_dir(&tmp.path().join("out")).join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    for (h, v) in header.iter().zip(&row) {
        if h.ends_with("_std") {
            assert_eq!(*v, "0", "{h}");
        }
    }
}

#[test]
fn audit_reports_and_honours_fresco_out() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fresco"))
        .current_dir(tmp.path())
        .env("FRESCO_OUT", "elsewhere")
        .args(["audit", "--instances", "40", "--out", "ignored"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("blocking pairs         0"));
    assert!(!tmp.path().join("ignored").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(only_run_dir(&tmp.path().join("elsewhere")).join("audit.json")).unwrap()).unwrap();
    assert_eq!(report["instances"], 40);
    assert_eq!(report["termination_violations"], 0);

    let oversize = fresco(tmp.path(), &["audit", "--max-pairs", "9"]);
    assert_eq!(oversize.status.code(), Some(1));
}
