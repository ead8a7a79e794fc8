use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use surroflow::pipeline::{run_experiment, RunConfig};

const STAGES: [&str; 9] = [
    "gen-network",
    "gen-demand",
    "gen-scenarios",
    "simulate",
    "build-dataset",
    "train",
    "evaluate",
    "predict",
    "export-map",
];

const TINY: &str = r#"{
  "seed": 4,
  "network": {"grid_size": 5, "district_count": 4},
  "demand": {"agent_count": 600},
  "scenarios": {"count": 24, "mean_size": 2, "seeds_per_scenario": 2},
  "oracle": {"base_seed_count": 2, "max_iterations": 40},
  "split": {"train": 0.6, "val": 0.2, "test": 0.2},
  "model": {"hidden_dim": 8, "transformer_heads": 2, "max_epochs": 15}
}"#;

fn surroflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surroflow")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_stage(stage: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    surroflow(&args)
}

fn run_all(config: &Path, out: &Path) {
    for stage in STAGES {
        let o = run_stage(stage, config, out, &[]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn full_chain_writes_artifacts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    run_all(&config, &out);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let runs = manifest["runs"].as_object().unwrap();
    assert_eq!(runs.len(), STAGES.len());
    for stage in STAGES {
        let entry = &runs[stage];
        assert_eq!(entry["seed"], 4);
        assert!(entry["wall_clock_s"].as_f64().unwrap() >= 0.0);
        assert!(!entry["outputs"].as_array().unwrap().is_empty(), "{stage}");
        for f in entry["outputs"].as_array().unwrap() {
            assert!(out.join(f["path"].as_str().unwrap()).is_file());
            assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
        }
    }
    assert!(runs["train"]["inputs"].as_array().unwrap().iter().any(|f| f["path"] == "dual.csv"));
    assert_eq!(runs["train"]["config"]["model"]["hidden_dim"], 8);
}

/// Recomputes the pooled report from the raw sample, prediction and network
/// files, independently of the eval module.
#[test]
fn report_matches_recomputation_from_raw_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    run_all(&config, &out);

    let net: Value = serde_json::from_str(&std::fs::read_to_string(out.join("network.json")).unwrap()).unwrap();
    let class: HashMap<String, String> = net["segments"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["id"].as_str().unwrap().to_string(), s["class"].as_str().unwrap().to_string()))
        .collect();
    let split: Value = serde_json::from_str(&std::fs::read_to_string(out.join("split.json")).unwrap()).unwrap();
    // subset -> (n, Σy, Σy², Σ(y−ŷ)²)
    let mut acc: HashMap<&str, [f64; 4]> = HashMap::new();
    for id in split["test"].as_array().unwrap() {
        let id = id.as_str().unwrap();
        let sample = csv_rows(&out.join("samples").join(format!("{id}.csv")));
        let pred: HashMap<String, f64> = csv_rows(&out.join("predictions").join(format!("{id}.csv")))
            .into_iter()
            .map(|r| (r[0].clone(), r[1].parse().unwrap()))
            .collect();
        for row in sample {
            let y: f64 = row[10].parse().unwrap();
            let treated = row[9].parse::<f64>().unwrap() > 0.0;
            let e = y - pred[&row[0]];
            let c = class[&row[0]].as_str();
            let mut subsets = vec!["All", if treated { "PolicyRoads" } else { "NonPolicyRoads" }];
            if c != "Residential" {
                subsets.push(c);
            }
            for s in subsets {
                let a = acc.entry(s).or_default();
                a[0] += 1.0;
                a[1] += y;
                a[2] += y * y;
                a[3] += e * e;
            }
        }
    }
    let report = csv_rows(&out.join("report.csv"));
    assert_eq!(report.len(), acc.len());
    for row in report {
        let [n, sy, syy, se] = acc[row[0].as_str()];
        let naive = syy / n - (sy / n) * (sy / n);
        let (r2, nv, pm): (f64, f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap(), row[3].parse().unwrap());
        assert_eq!(row[4].parse::<f64>().unwrap(), n);
        assert!((nv - naive).abs() <= 1e-8 * naive.max(1.0), "{}", row[0]);
        assert!((pm - se / n).abs() <= 1e-8 * pm.max(1.0), "{}", row[0]);
        // the identity, from the emitted numbers alone
        assert!((r2 - (1.0 - pm / nv)).abs() <= 1e-12, "{}", row[0]);
    }
}

#[test]
fn pipeline_is_deterministic_and_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&config, &a);
    run_all(&config, &b);
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    for f in &files {
        // manifests carry wall-clock times; predict.csv carries inference durations
        if f == Path::new("manifest.json") || f == Path::new("predict.csv") {
            continue;
        }
        assert!(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(), "{} differs", f.display());
    }
    let lib = run_experiment(&RunConfig::from_json(TINY).unwrap()).unwrap();
    assert_eq!(std::fs::read_to_string(a.join("report.csv")).unwrap(), lib.evaluation.report.to_csv());
}

#[test]
fn train_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    // non-default values via flags and --set, so the manifest must carry them
    for stage in &STAGES[..5] {
        assert!(run_stage(stage, &config, &out, &[]).status.success());
    }
    let o = run_stage("train", &config, &out, &["--epochs", "4", "--set", "model.learning_rate=0.002"]);
    assert!(o.status.success());
    let first = std::fs::read(out.join("model.sfpt")).unwrap();
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let recorded = dir.path().join("recorded.json");
    std::fs::write(&recorded, manifest["runs"]["train"]["config"].to_string()).unwrap();
    std::fs::remove_file(out.join("model.sfpt")).unwrap();
    assert!(run_stage("train", &recorded, &out, &[]).status.success());
    assert_eq!(std::fs::read(out.join("model.sfpt")).unwrap(), first);
}

#[test]
fn gen_scenarios_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "{}");
    let out = dir.path().join("run");
    assert!(run_stage("gen-network", &config, &out, &[]).status.success());
    let o = run_stage("gen-scenarios", &config, &out, &["--count", "200", "--mean-size", "5", "--reduction", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scenarios: Value = serde_json::from_str(&std::fs::read_to_string(out.join("scenarios.json")).unwrap()).unwrap();
    let list = scenarios.as_array().unwrap();
    assert_eq!(list.len(), 200);
    assert!(list.iter().all(|s| s["reduction"] == 0.5));
    let mean = list.iter().map(|s| s["districts"].as_array().unwrap().len()).sum::<usize>() as f64 / 200.0;
    assert!((mean - 5.0).abs() < 0.5, "mean district count {mean}");
}

fn error_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().find(|l| l.starts_with('{')).expect("error JSON on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");

    let o = surroflow(&["gen-network", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(surroflow(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(surroflow(&["train"]).status.code(), Some(1));
    assert_eq!(surroflow(&["--help"]).status.code(), Some(0));

    let o = run_stage("gen-network", &config, &out, &["--set", "network.bogus=1", "--error-json"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["kind"], "validation");

    let o = run_stage("train", &config, &out, &["--error-json"]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["error"]["subcommand"], "train");
    assert!(e["error"]["message"].as_str().unwrap().contains("missing input"));

    for stage in &STAGES[..5] {
        assert!(run_stage(stage, &config, &out, &[]).status.success());
    }
    let o = run_stage("predict", &config, &out, &["--scenario", "nope"]);
    assert_eq!(o.status.code(), Some(1));

    // an absurd step size overflows the weights: a runtime failure, not bad input
    let o = run_stage("train", &config, &out, &["--set", "model.learning_rate=1e300", "--error-json"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_json(&o)["error"]["kind"], "runtime");
}

#[test]
fn exported_maps_are_feature_collections() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    run_all(&config, &out);
    let maps = files_under(&out.join("maps"));
    assert!(!maps.is_empty());
    assert!(maps.iter().any(|m| m.to_string_lossy().ends_with("_predicted.geojson")));
    for m in maps {
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("maps").join(&m)).unwrap()).unwrap();
        assert_eq!(doc["type"], "FeatureCollection");
        for f in doc["features"].as_array().unwrap() {
            assert_eq!(f["geometry"]["type"], "LineString");
            assert!(f["geometry"]["coordinates"].as_array().unwrap().len() >= 2);
            let pct = f["properties"]["change_pct"].as_f64().unwrap();
            assert!((-100.0..=500.0).contains(&pct));
        }
    }
}
