//! End-to-end runs of the `trustfed` binary.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trustfed::domain::{write_population_csv, write_utilities_csv};
use trustfed::optimizer::{random_context, Instance};

fn trustfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trustfed")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(format!("{name}.json"));
    fs::write(&p, body).unwrap();
    p
}

const SHORT: &str = r#"{"name": "short", "seed": 3, "fl": {"rounds": 6}}"#;

fn run_into(config: &Path, out: &Path) -> Output {
    trustfed(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short", SHORT);
    let out = dir.path().join("out");
    let o = run_into(&cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trace.jsonl", "summary.csv", "trust_log.jsonl", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(out.join("trace.jsonl")).unwrap().lines().count(), 6);
    let manifest: serde_json::Value = serde_json::from_reader(File::open(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["scenario"], "short");
    assert_eq!(manifest["config_sha1"].as_str().unwrap().len(), 40);
}

#[test]
fn config_without_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "noseed", r#"{"name": "noseed"}"#);
    let o = run_into(&cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short", SHORT);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_into(&cfg, &a).status.success());
    assert!(run_into(&cfg, &b).status.success());
    for f in ["trace.jsonl", "summary.csv", "trust_log.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn compare_merges_traces_by_round() {
    let dir = tempfile::tempdir().unwrap();
    let ga = write_config(dir.path(), "ga", r#"{"name": "ga", "seed": 1, "fl": {"rounds": 5}}"#);
    let rnd = write_config(dir.path(), "rnd", r#"{"name": "rnd", "seed": 1, "selection": "random", "fl": {"rounds": 5}}"#);
    let short = write_config(dir.path(), "shorter", r#"{"name": "shorter", "seed": 1, "fl": {"rounds": 3}}"#);
    for (cfg, out) in [(&ga, "ga"), (&rnd, "rnd"), (&short, "shorter")] {
        assert!(run_into(cfg, &dir.path().join(out)).status.success());
    }
    let trace = |name: &str| dir.path().join(name).join("trace.jsonl").to_str().unwrap().to_string();
    let table = dir.path().join("cmp.csv");
    let o = trustfed(&["compare", &trace("ga"), &trace("rnd"), "--out", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("round,accuracy_ga,"), "{}", lines[0]);
    assert!(lines[0].contains("accuracy_rnd"));

    let single = trustfed(&["compare", &trace("ga"), "--out", table.to_str().unwrap()]);
    assert_eq!(single.status.code(), Some(2));
    let uneven = trustfed(&["compare", &trace("ga"), &trace("shorter"), "--out", table.to_str().unwrap()]);
    assert_eq!(uneven.status.code(), Some(2));
    assert!(stderr(&uneven).contains("rounds"), "{}", stderr(&uneven));
}

fn write_instance(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let ctx = random_context(n, 3, seed);
    let ids: Vec<_> = ctx.devices.iter().map(|d| d.id).collect();
    write_population_csv(File::create(dir.join("devices.csv")).unwrap(), &ctx.devices).unwrap();
    write_utilities_csv(File::create(dir.join("utilities.csv")).unwrap(), &ids, &ctx.utilities).unwrap();
    let header = Instance {
        devices: "devices.csv".into(),
        utilities: "utilities.csv".into(),
        areas: ctx.areas,
        trust: ctx.trust.clone(),
        accuracy_clusters: ctx.accuracy_clusters.clone(),
        requested_areas: ctx.requested_areas.clone(),
        weights: ctx.weights,
        thresholds: ctx.thresholds,
    };
    let path = dir.join("instance.json");
    serde_json::to_writer_pretty(File::create(&path).unwrap(), &header).unwrap();
    path
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}: "))).unwrap_or_else(|| panic!("no {key} in {text}"))
}

#[test]
fn bench_opt_reaches_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write_instance(dir.path(), 12, 77);
    let o = trustfed(&["bench-opt", "--instance", inst.to_str().unwrap(), "--seed", "4", "--oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(field(&text, "devices"), "12");
    let ratio: f64 = field(&text, "ratio").parse().unwrap();
    assert!(ratio >= 0.99, "{text}");

    let again = stdout(&trustfed(&["bench-opt", "--instance", inst.to_str().unwrap(), "--seed", "4"]));
    assert_eq!(field(&again, "selection"), field(&text, "selection"));
}

#[test]
fn oracle_refuses_large_instances() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write_instance(dir.path(), 25, 5);
    let o = trustfed(&["bench-opt", "--instance", inst.to_str().unwrap(), "--oracle"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at most 20"), "{}", stderr(&o));
}
