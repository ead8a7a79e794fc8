use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use surroflow::Error;

mod commands;
mod manifest;
mod overrides;

#[derive(Parser, Debug)]
#[command(name = "surroflow", version, about = "Traffic-policy surrogate lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON); missing keys take the desk-scale defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set model.hidden_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// On failure, also print a JSON error object to stderr.
    #[arg(long)]
    pub error_json: bool,
}

#[derive(Args, Debug, Clone)]
pub struct NetworkArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub districts: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct DemandArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub agents: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ScenarioArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub mean_size: Option<f64>,
    #[arg(long)]
    pub sd_size: Option<f64>,
    #[arg(long)]
    pub reduction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub base_seeds: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PickArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scenario ids; defaults to the test split.
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic city (network.json).
    GenNetwork(NetworkArgs),
    /// Generate the origin-destination demand (demand.json).
    GenDemand(DemandArgs),
    /// Sample policy scenarios and the train/val/test split.
    GenScenarios(ScenarioArgs),
    /// Run the assignment oracle: base case and per-scenario targets.
    Simulate(SimulateArgs),
    /// Write the dual graph and one feature/target sample per scenario.
    BuildDataset(Common),
    /// Train the surrogate on the train split.
    Train(TrainArgs),
    /// Pooled metrics on the test split.
    Evaluate(Common),
    /// Per-scenario predictions, metrics and inference time.
    Predict(PickArgs),
    /// GeoJSON maps of actual and predicted volume changes.
    ExportMap(PickArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenNetwork(_) => "gen-network",
            Command::GenDemand(_) => "gen-demand",
            Command::GenScenarios(_) => "gen-scenarios",
            Command::Simulate(_) => "simulate",
            Command::BuildDataset(_) => "build-dataset",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
            Command::ExportMap(_) => "export-map",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenNetwork(a) => &a.common,
            Command::GenDemand(a) => &a.common,
            Command::GenScenarios(a) => &a.common,
            Command::Simulate(a) => &a.common,
            Command::BuildDataset(c) | Command::Evaluate(c) => c,
            Command::Train(a) => &a.common,
            Command::Predict(a) | Command::ExportMap(a) => &a.common,
        }
    }

    /// Subcommand flags as `(config key, JSON value)` overrides.
    fn flag_overrides(&self) -> Vec<(&'static str, serde_json::Value)> {
        let mut out = Vec::new();
        let mut put = |key, v: Option<serde_json::Value>| {
            if let Some(v) = v {
                out.push((key, v));
            }
        };
        match self {
            Command::GenNetwork(a) => {
                put("network.grid_size", a.grid_size.map(|v| json!(v)));
                put("network.district_count", a.districts.map(|v| json!(v)));
            }
            Command::GenDemand(a) => put("demand.agent_count", a.agents.map(|v| json!(v))),
            Command::GenScenarios(a) => {
                put("scenarios.count", a.count.map(|v| json!(v)));
                put("scenarios.mean_size", a.mean_size.map(|v| json!(v)));
                put("scenarios.sd_size", a.sd_size.map(|v| json!(v)));
                put("scenarios.reduction", a.reduction.map(|v| json!(v)));
            }
            Command::Simulate(a) => {
                put("oracle.base_seed_count", a.base_seeds.map(|v| json!(v)));
                put("oracle.max_iterations", a.max_iterations.map(|v| json!(v)));
            }
            Command::Train(a) => {
                put("model.max_epochs", a.epochs.map(|v| json!(v)));
                put("model.hidden_dim", a.hidden_dim.map(|v| json!(v)));
                put("model.patience", a.patience.map(|v| json!(v)));
            }
            _ => {}
        }
        out
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    let common = cli.command.common().clone();
    let result = overrides::effective_config(&common, &cli.command.flag_overrides())
        .and_then(|(config, out)| commands::run(&cli.command, name, &config, &out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("surroflow {name}: {e}");
            if common.error_json {
                let kind = if code == 1 { "validation" } else { "runtime" };
                let doc = json!({"error": {"subcommand": name, "kind": kind, "exit_code": code, "message": e.to_string()}});
                eprintln!("{doc}");
            }
            ExitCode::from(code)
        }
    }
}
