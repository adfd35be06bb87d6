use std::path::Path;
use std::process::{Command, Output};

fn fusedkv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusedkv"))
        .current_dir(dir)
        .env_remove("FUSEDKV_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(dir.join("manifest.json"))).unwrap()
}

#[test]
fn training_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["train", "--strategy", "fusedkv-lite", "--preset", "toy", "--steps", "12", "--seed", "5", "--out-dir", out];
    for out in ["a", "b"] {
        let o = fusedkv(tmp.path(), &args(out));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["losses.csv", "grad_norms.csv"] {
        assert_eq!(read(tmp.path().join("a").join(f)), read(tmp.path().join("b").join(f)), "{f}");
    }
    let losses = read(tmp.path().join("a/losses.csv"));
    assert!(losses.starts_with("step,loss,lr\n"));
    assert_eq!(losses.lines().count(), 13);
    let m = manifest(&tmp.path().join("a"));
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 5);
    assert!(m["code_version"].as_str().is_some_and(|s| !s.is_empty()));
}

#[test]
fn cost_rows_cover_methods_lengths_and_devices() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fusedkv(tmp.path(), &["cost", "--methods", "MHA,FusedKV", "--S", "2048..8192", "--out-dir", "c"]);
    assert!(o.status.success());
    let csv = read(tmp.path().join("c/cost.csv"));
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..4], &["method", "device", "layers", "seq_len"]);
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    let mem = header.iter().position(|h| *h == "cache_memory_ratio").unwrap();
    let io = header.iter().position(|h| *h == "cache_io_ratio").unwrap();
    for line in csv.lines().skip(1).filter(|l| l.starts_with("FusedKV,")) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[mem].parse::<f64>().unwrap(), 0.5);
        assert_eq!(f[io].parse::<f64>().unwrap(), 1.5);
    }
    assert_eq!(manifest(&tmp.path().join("c"))["config"]["methods"][1], "FusedKV");
}

#[test]
fn json_format_writes_arrays() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fusedkv(tmp.path(), &["cost", "--S", "1024", "--format", "json", "--out-dir", "j"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&read(tmp.path().join("j/cost.json"))).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);
    assert_eq!(v[0]["method"], "MHA/GQA");
}

#[test]
fn compare_reports_cache_ratios_and_claims() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fusedkv(
        tmp.path(),
        &["compare", "--strategies", "vanilla,yoco,fusedkv,fusedkv-lite", "--preset", "toy", "--steps", "6", "--seed", "2", "--jobs", "2", "--out-dir", "cmp"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("cmp");
    let summary = read(dir.join("compare_summary.csv"));
    let ratios: Vec<(String, f64)> = summary
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[6].parse().unwrap())
        })
        .collect();
    let expect = [("Vanilla", 1.0), ("YOCO", 0.5), ("FusedKV", 0.5), ("FusedKV-Lite", 0.5)];
    assert_eq!(ratios, expect.map(|(s, r)| (s.to_string(), r)));
    for s in ["Vanilla", "YOCO", "FusedKV", "FusedKV-Lite"] {
        assert!(dir.join(s).join("losses.csv").exists(), "{s}");
    }
    assert!(read(dir.join("compare_claims.csv")).contains("reported, not gated"));
    assert!(read(dir.join("compare_losses.csv")).starts_with("strategy,step,loss,lr\n"));
}

#[test]
fn decode_bench_and_heatmap_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fusedkv(tmp.path(), &["decode-bench", "--preset", "toy", "--strategies", "vanilla,fusedkv", "--new-tokens", "4", "--out-dir", "d"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(tmp.path().join("d/decode.csv")).lines().count(), 3);
    let o = fusedkv(tmp.path(), &["heatmap", "--preset", "toy", "--steps", "0", "--seed", "1", "--out-dir", "h"]);
    assert!(o.status.success());
    assert!(read(tmp.path().join("h/heatmap.csv")).starts_with("cache,target,source,weight\n"));
    let o = fusedkv(tmp.path(), &["heatmap", "--strategy", "yoco", "--preset", "toy", "--seed", "1", "--out-dir", "h2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes_and_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fusedkv(tmp.path(), &["verify", "--suite", "rope", "--seed", "1", "--out-dir", "v"]);
    assert!(o.status.success());
    let report = read(tmp.path().join("v/verify.csv"));
    assert!(report.lines().skip(1).all(|l| l.starts_with("rope,") && l.contains(",true,")));
}

#[test]
fn config_file_and_environment_supply_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.conf"), "seed = 3\nsteps = 9\npreset = toy\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fusedkv"))
        .current_dir(tmp.path())
        .env("FUSEDKV_OUT_DIR", "from-env")
        .args(["train", "--config", "run.conf", "--steps", "4"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&tmp.path().join("from-env"));
    assert_eq!(m["config"]["train"]["steps"], 4);
    assert_eq!(m["seed"], 3);
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fusedkv(tmp.path(), &["train", "--seed", "1", "--bogus"]).status.code(), Some(1));
    assert_eq!(fusedkv(tmp.path(), &["train", "--preset", "toy"]).status.code(), Some(1));
    assert_eq!(fusedkv(tmp.path(), &["compare", "--strategies", "vanilla", "--seed", "1"]).status.code(), Some(1));
    assert_eq!(fusedkv(tmp.path(), &["train", "--strategy", "nope", "--seed", "1"]).status.code(), Some(1));
    std::fs::write(tmp.path().join("bad.conf"), "wings = 2\n").unwrap();
    let o = fusedkv(tmp.path(), &["train", "--config", "bad.conf", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.conf:1"));
    assert_eq!(fusedkv(tmp.path(), &["--help"]).status.code(), Some(0));
}
