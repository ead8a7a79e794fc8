//! `manifest.json`: one entry per subcommand run in an output directory.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use surroflow::pipeline::RunConfig;
use surroflow::Result;

pub const FILE: &str = "manifest.json";

fn sha256(path: &Path) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(std::fs::read(path)?)))
}

fn describe(out: &Path, files: &[PathBuf]) -> Result<Vec<Value>> {
    files
        .iter()
        .map(|f| {
            let shown = f.strip_prefix(out).unwrap_or(f);
            Ok(json!({"path": shown.display().to_string(), "sha256": sha256(f)?}))
        })
        .collect()
}

pub struct Entry<'a> {
    pub subcommand: &'a str,
    pub config: &'a RunConfig,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock: Duration,
    pub details: Value,
}

/// Records `entry` under its subcommand name, keeping other subcommands' entries.
pub fn record(out: &Path, entry: Entry<'_>) -> Result<()> {
    let path = out.join(FILE);
    let mut doc = match std::fs::read_to_string(&path).ok().and_then(|t| serde_json::from_str::<Value>(&t).ok()) {
        Some(Value::Object(m)) => m,
        _ => Map::new(),
    };
    doc.insert("tool".into(), json!("surroflow"));
    doc.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    let started = SystemTime::now().checked_sub(entry.wall_clock).unwrap_or(UNIX_EPOCH);
    let run = json!({
        "subcommand": entry.subcommand,
        "seed": entry.config.seed,
        "config": entry.config,
        "inputs": describe(out, &entry.inputs)?,
        "outputs": describe(out, &entry.outputs)?,
        "started_unix_s": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "wall_clock_s": entry.wall_clock.as_secs_f64(),
        "details": entry.details,
    });
    let runs = doc.entry("runs").or_insert_with(|| Value::Object(Map::new()));
    if !runs.is_object() {
        *runs = Value::Object(Map::new());
    }
    runs.as_object_mut().expect("object").insert(entry.subcommand.into(), run);
    std::fs::write(path, serde_json::to_string_pretty(&Value::Object(doc))?)?;
    Ok(())
}
