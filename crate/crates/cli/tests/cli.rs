use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn base_config() -> Value {
    json!({
        "seed": 7,
        "dataset": { "synthetic": { "train": 240, "test": 80, "dim": 12, "classes": 4 } },
        "partition": { "clients": 6, "alpha": 0.5 },
        "model": { "hidden": 16 },
        "rounds": {
            "clients_per_round": 3,
            "rounds": 2,
            "eta": 0.5,
            "t_grid": [10, 50, 100],
            "tau": 5,
            "batch_size": 20,
            "centralized_steps": 20
        },
        "cp": { "beta": 0.5, "d1_proj": 8, "sparsity": 0.5 },
        "compare": { "schemes": ["ntkfl", "fedavg"], "target_accuracy": 0.0, "tau_grid": [5] },
        "analysis": { "decay_steps": 200, "gap_grid": [0, 10, 20] }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn ntkfed(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntkfed"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_rounds_write_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["rounds"]["rounds"] = json!(0);
    let config = write_config(dir.path(), &cfg);
    let o = ntkfed(&["train"], &config, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, "round,scheme,chosen_t_or_tau,train_loss,test_acc,uplink_bytes,lambda_min,wall_ms\n");
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ntkfed(&["train"], &config, out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("weights.bin")).unwrap(), fs::read(b.join("weights.bin")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 3);

    let c = dir.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_ntkfed"))
        .args(["train", "--seed", "8", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&c)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn every_scheme_trains() {
    let dir = tempfile::tempdir().unwrap();
    for scheme in ["ntkfl", "fedavg", "centralized", "cp-ntkfl"] {
        let mut cfg = base_config();
        cfg["scheme"] = json!(scheme);
        if scheme == "cp-ntkfl" {
            // Gaussian projections scale input norms by about √d′
            cfg["rounds"]["eta"] = json!(0.05);
        }
        let config = write_config(dir.path(), &cfg);
        let out = dir.path().join(scheme);
        let o = ntkfed(&["train"], &config, &out);
        assert!(o.status.success(), "{scheme}: {}", stderr(&o));
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with(&format!("1,{scheme},")), "{csv}");
    }
}

#[test]
fn verify_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let o = ntkfed(&["verify"], &config, dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let report = fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    assert_eq!(report.lines().count(), 8);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 7);
}

#[test]
fn verify_only_runs_the_named_check() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let o = ntkfed(&["verify", "--only", "shuffle"], &config, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("PASS shuffle"), "{lines:?}");

    let o = ntkfed(&["verify", "--only", "nonsense"], &config, dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nonsense"));
}

#[test]
fn injected_kernel_asymmetry_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["analysis"]["inject_kernel_asymmetry"] = json!(true);
    let config = write_config(dir.path(), &cfg);
    let o = ntkfed(&["verify"], &config, dir.path());
    assert!(!o.status.success());
    let out = stdout(&o);
    let failing: Vec<&str> = out.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failing.len(), 1, "{out}");
    assert!(failing[0].starts_with("FAIL kernel"), "{out}");
}

#[test]
fn bad_configs_are_rejected_with_the_key_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["cp"]["beta"] = json!(1.5);
    let config = write_config(dir.path(), &cfg);
    let o = ntkfed(&["train"], &config, dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cp.beta must lie in (0,1]"), "{}", stderr(&o));

    let mut cfg = base_config();
    cfg["rounds"]["learning_rate"] = json!(0.1);
    let config = write_config(dir.path(), &cfg);
    let o = ntkfed(&["train"], &config, dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = ntkfed(&["train"], &dir.path().join("missing.json"), dir.path());
    assert!(!o.status.success());
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn compare_with_zero_target_reaches_in_round_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let o = ntkfed(&["compare"], &config, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    for row in rows {
        assert_eq!(row.split(',').nth(2), Some("1"), "{row}");
    }
}

#[test]
fn partition_and_comm_report_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config());
    let o = ntkfed(&["partition"], &config, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let part = fs::read_to_string(dir.path().join("partition.csv")).unwrap();
    assert_eq!(part.lines().count(), 7);

    let o = ntkfed(&["comm-report"], &config, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let comm = fs::read_to_string(dir.path().join("comm.csv")).unwrap();
    assert_eq!(comm.lines().count(), 4, "{comm}");
    // 3 clients of 40 samples, 4 classes, 12·16+16+16·4+4 weights
    let d = 12 * 16 + 16 + 16 * 4 + 4;
    let ntk = 8 * 3 * (40 * 4 * d + 2 * 40 * 4);
    assert!(comm.contains(&format!("ntkfl,{ntk}")), "{comm}");
    assert!(comm.contains(&format!("fedavg,{}", 8 * 3 * d)), "{comm}");
}
