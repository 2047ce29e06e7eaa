use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bump(nodes: usize) -> Value {
    json!({
        "lagrangian": {
            "space": {"kind": "flat_torus", "dim": 1},
            "potential": {"terms": [{"wave": [0], "amplitude": 0.5}, {"wave": [1], "amplitude": 0.5}]}
        },
        "grid": [nodes],
        "delta": 0.1,
        "lambdas": [0.4, 0.2, 0.1],
        "params": {"t": 3.0}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn wkam(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wkam"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--workers")
        .arg("2")
        .env_remove("WKAM_CACHE_DIR")
        .output()
        .unwrap()
}

fn headline(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn zero_potential_has_zero_critical_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = bump(24);
    cfg["lagrangian"]["potential"]["terms"] = json!([]);
    let path = write_config(dir.path(), "flat.json", &cfg);
    let h = headline(&wkam(&["critical"], &path, &dir.path().join("out")));
    assert!(h["c_estimate"].as_f64().unwrap().abs() < 1e-9);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/critical.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "critical");
    assert_eq!(manifest["config"]["grid"], json!([24]));
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "critical-u.csv"));
}

#[test]
fn aubry_mask_is_the_potential_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "bump.json", &bump(32));
    let h = headline(&wkam(&["aubry"], &path, &dir.path().join("out")));
    assert_eq!(h["aubry_nodes"], json!([0]));
    let mask = fs::read_to_string(dir.path().join("out/aubry-mask.csv")).unwrap();
    let mut lines = mask.lines();
    assert_eq!(lines.next(), Some("node,h_diag,in_set"));
    let in_set: Vec<&str> = lines.filter(|l| l.ends_with(",1") || l.ends_with(",true")).collect();
    assert_eq!(in_set.len(), 1);
}

#[test]
fn second_kernel_build_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "bump.json", &bump(24));
    let out = dir.path().join("out");
    let first = headline(&wkam(&["kernel-build"], &path, &out));
    let second = headline(&wkam(&["kernel-build"], &path, &out));
    assert_eq!(first["kernel_cache_hit"], false);
    assert_eq!(second["kernel_cache_hit"], true);
    assert_eq!(first["kernel_sha256"], second["kernel_sha256"]);
    assert_eq!(first["kernel_hash"], second["kernel_hash"]);
}

#[test]
fn bad_configurations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = write_config(dir.path(), "missing.json", &json!({"grid": [8]}));
    assert_eq!(wkam(&["critical"], &missing, &out).status.code(), Some(2));
    let mut cfg = bump(16);
    cfg["surprise"] = json!(1);
    let unknown = write_config(dir.path(), "unknown.json", &cfg);
    assert_eq!(wkam(&["critical"], &unknown, &out).status.code(), Some(2));
    let mut cfg = bump(16);
    cfg["delta"] = json!(-0.1);
    let negative = write_config(dir.path(), "negative.json", &cfg);
    assert_eq!(wkam(&["critical"], &negative, &out).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three_and_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = bump(16);
    cfg["max_iters"] = json!(1);
    let path = write_config(dir.path(), "short.json", &cfg);
    let out = dir.path().join("out");
    assert_eq!(wkam(&["critical"], &path, &out).status.code(), Some(3));
    let diag = fs::read_to_string(out.join("critical.diagnostics.txt")).unwrap();
    assert!(diag.contains("did not converge"));
    assert!(!out.join("critical.manifest.json").exists());
}

#[test]
fn report_collects_runs_and_notices_missing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "bump.json", &bump(24));
    let out = dir.path().join("out");
    headline(&wkam(&["critical"], &path, &out));
    headline(&wkam(&["vanishing-discount"], &path, &out));
    let h = headline(&wkam(&["report"], &path, &out));
    assert_eq!(h["runs"], json!(["critical", "vanishing-discount"]));
    let table = fs::read_to_string(out.join("report-headlines.csv")).unwrap();
    assert!(table.starts_with("command,key,value\n"));
    assert!(table.contains("critical,c_estimate,"));
    let vanishing = fs::read_to_string(out.join("report-vanishing.csv")).unwrap();
    assert_eq!(vanishing.lines().count(), 4);
    let script = fs::read_to_string(out.join("plots.gp")).unwrap();
    assert!(script.contains("critical-u.csv"));
    assert!(script.contains("report-vanishing.csv"));

    fs::remove_file(out.join("critical-u.csv")).unwrap();
    let o = wkam(&["report"], &path, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("critical-u.csv"));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "bump.json", &bump(24));
    let read = |out: &str| fs::read(dir.path().join(out).join("lo-evolve-initial.csv")).unwrap();
    for (out, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        headline(&wkam(&["lo-evolve", "--seed", seed], &path, &dir.path().join(out)));
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let limit = |out: &str| fs::read(dir.path().join(out).join("lo-evolve-limit.csv")).unwrap();
    assert_eq!(limit("a"), limit("b"));
}
