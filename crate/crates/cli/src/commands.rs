//! Subcommand bodies. Every stage reads the previous stages' files from the
//! output directory and records itself in `manifest.json`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use surroflow::assign::{load_demand, save_demand, AssignmentResult};
use surroflow::dual::{to_dual, DualGraph};
use surroflow::eval::{predicted_mse, r_squared, scenario_metrics_csv};
use surroflow::export::export_map;
use surroflow::gnn::{self, MessageGraph, Sample, SurrogateModel};
use surroflow::io::{read_dual, read_sample, read_volumes, write_dual, write_sample, write_volumes};
use surroflow::network::{load_network, save_network, RoadNetwork};
use surroflow::pipeline::{self, RunConfig};
use surroflow::scenario::{load_scenarios, save_scenarios, treated_segments, DatasetSplit, Scenario};
use surroflow::{Error, Result};

use crate::manifest::{self, Entry};
use crate::Command;

/// File names inside the output directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Layout {
        Layout { root: root.to_path_buf() }
    }
    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
    fn network(&self) -> PathBuf {
        self.file("network.json")
    }
    fn demand(&self) -> PathBuf {
        self.file("demand.json")
    }
    fn scenarios(&self) -> PathBuf {
        self.file("scenarios.json")
    }
    fn split(&self) -> PathBuf {
        self.file("split.json")
    }
    fn base(&self) -> PathBuf {
        self.file("base_volumes.csv")
    }
    fn target(&self, id: &str) -> PathBuf {
        self.root.join("targets").join(format!("{id}.csv"))
    }
    fn dual(&self) -> PathBuf {
        self.file("dual.csv")
    }
    fn sample(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(format!("{id}.csv"))
    }
    fn params(&self) -> PathBuf {
        self.file("model.sfpt")
    }
    fn sidecar(&self) -> PathBuf {
        self.file("model.json")
    }
    fn prediction(&self, id: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{id}.csv"))
    }
    fn map(&self, id: &str, kind: &str) -> PathBuf {
        self.root.join("maps").join(format!("{id}_{kind}.geojson"))
    }
}

fn require(path: &Path, producer: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Validation(format!("missing input {} (run `{producer}` first)", path.display())))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

struct Stage<'a> {
    layout: Layout,
    config: &'a RunConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    details: Value,
}

impl Stage<'_> {
    fn input(&mut self, path: PathBuf, producer: &str) -> Result<PathBuf> {
        let p = require(&path, producer)?;
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn network(&mut self) -> Result<RoadNetwork> {
        load_network(self.input(self.layout.network(), "gen-network")?)
    }

    fn scenarios(&mut self) -> Result<Vec<Scenario>> {
        load_scenarios(self.input(self.layout.scenarios(), "gen-scenarios")?)
    }

    fn split(&mut self) -> Result<DatasetSplit> {
        let path = self.input(self.layout.split(), "gen-scenarios")?;
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Parse { record: "split file".into(), message: e.to_string() })
    }

    fn graph(&mut self, net: &RoadNetwork) -> Result<DualGraph> {
        read_dual(net, self.input(self.layout.dual(), "build-dataset")?)
    }

    fn model(&mut self) -> Result<SurrogateModel> {
        let params = self.input(self.layout.params(), "train")?;
        let sidecar = self.input(self.layout.sidecar(), "train")?;
        SurrogateModel::load(params, sidecar)
    }

    fn samples(&mut self, graph: &DualGraph, ids: &[String]) -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                let path = self.input(self.layout.sample(id), "build-dataset")?;
                let (features, targets) = read_sample(graph, path)?;
                Ok(Sample { id: id.clone(), features, targets })
            })
            .collect()
    }

    fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }
}

/// Scenario ids chosen on the command line, or the test split.
fn pick(stage: &mut Stage<'_>, requested: &[String], scenarios: &[Scenario]) -> Result<Vec<String>> {
    if requested.is_empty() {
        return Ok(stage.split()?.test);
    }
    for id in requested {
        if !scenarios.iter().any(|s| &s.id == id) {
            return Err(Error::Validation(format!("unknown scenario {id}")));
        }
    }
    Ok(requested.to_vec())
}

pub fn run(command: &Command, name: &str, config: &RunConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    ensure_dir(out)?;
    let mut stage =
        Stage { layout: Layout::new(out), config, inputs: Vec::new(), outputs: Vec::new(), details: json!({}) };
    match command {
        Command::GenNetwork(_) => gen_network(&mut stage)?,
        Command::GenDemand(_) => gen_demand(&mut stage)?,
        Command::GenScenarios(_) => gen_scenarios(&mut stage)?,
        Command::Simulate(_) => simulate(&mut stage)?,
        Command::BuildDataset(_) => build_dataset(&mut stage)?,
        Command::Train(_) => train(&mut stage)?,
        Command::Evaluate(_) => evaluate(&mut stage)?,
        Command::Predict(a) => predict(&mut stage, &a.scenarios)?,
        Command::ExportMap(a) => export(&mut stage, &a.scenarios)?,
    }
    let Stage { inputs, outputs, details, .. } = stage;
    manifest::record(
        out,
        Entry { subcommand: name, config, inputs, outputs, wall_clock: started.elapsed(), details },
    )
}

fn gen_network(stage: &mut Stage<'_>) -> Result<()> {
    let net = pipeline::build_network(stage.config)?;
    save_network(&net, stage.output(stage.layout.network()))?;
    println!(
        "network: {} intersections, {} segments, {} districts",
        net.node_count(),
        net.segment_count(),
        net.district_count()
    );
    stage.details = json!({"intersections": net.node_count(), "segments": net.segment_count()});
    Ok(())
}

fn gen_demand(stage: &mut Stage<'_>) -> Result<()> {
    let net = stage.network()?;
    let demand = pipeline::build_demand(stage.config, &net)?;
    save_demand(&net, &demand, stage.output(stage.layout.demand()))?;
    println!("demand: {} OD pairs, {} trips", demand.trips().len(), demand.total());
    stage.details = json!({"od_pairs": demand.trips().len(), "trips": demand.total()});
    Ok(())
}

fn gen_scenarios(stage: &mut Stage<'_>) -> Result<()> {
    let net = stage.network()?;
    let scenarios = pipeline::build_scenarios(stage.config, &net)?;
    let split = pipeline::build_split(stage.config, &scenarios)?;
    save_scenarios(&scenarios, stage.output(stage.layout.scenarios()))?;
    write_json(&stage.output(stage.layout.split()), &split)?;
    let mean = scenarios.iter().map(|s| s.policy.districts().len()).sum::<usize>() as f64 / scenarios.len() as f64;
    println!(
        "scenarios: {} (mean district count {mean:.3}); split {}/{}/{}",
        scenarios.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    stage.details = json!({"count": scenarios.len(), "mean_district_count": mean});
    Ok(())
}

fn simulate(stage: &mut Stage<'_>) -> Result<()> {
    let net = stage.network()?;
    let demand = load_demand(&net, stage.input(stage.layout.demand(), "gen-demand")?)?;
    let scenarios = stage.scenarios()?;
    let t = Instant::now();
    let base = pipeline::build_base(stage.config, &net, &demand)?;
    let base_time = t.elapsed();
    write_volumes(&net, &base.volumes, stage.output(stage.layout.base()))?;
    let t = Instant::now();
    let targets = pipeline::simulate_all(&net, &demand, &base, &scenarios, stage.config.oracle.msa())?;
    let sim_time = t.elapsed();
    ensure_dir(&stage.layout.root.join("targets"))?;
    for (s, y) in scenarios.iter().zip(&targets) {
        write_volumes(&net, y, stage.output(stage.layout.target(&s.id)))?;
    }
    println!(
        "base case: relative gap {:.4} after {} iterations ({:.2} s); {} scenarios in {:.2} s",
        base.relative_gap,
        base.iterations,
        base_time.as_secs_f64(),
        scenarios.len(),
        sim_time.as_secs_f64()
    );
    stage.details = json!({
        "base_relative_gap": base.relative_gap,
        "base_iterations": base.iterations,
        "base_seeds": pipeline::base_seeds(stage.config),
        "scenario_seconds_total": sim_time.as_secs_f64(),
    });
    Ok(())
}

fn build_dataset(stage: &mut Stage<'_>) -> Result<()> {
    let net = stage.network()?;
    let scenarios = stage.scenarios()?;
    let base_path = stage.input(stage.layout.base(), "simulate")?;
    let base = AssignmentResult { volumes: read_volumes(&net, base_path)?, relative_gap: f64::NAN, iterations: 0 };
    let targets = scenarios
        .iter()
        .map(|s| {
            let p = stage.input(stage.layout.target(&s.id), "simulate")?;
            read_volumes(&net, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let graph = to_dual(&net);
    let samples = pipeline::build_samples(&net, &graph, &base, &scenarios, &targets)?;
    write_dual(&graph, stage.output(stage.layout.dual()))?;
    ensure_dir(&stage.layout.root.join("samples"))?;
    for s in &samples {
        write_sample(&graph, &s.features, &s.targets, stage.output(stage.layout.sample(&s.id)))?;
    }
    println!("dataset: {} samples, {} nodes, {} dual edges", samples.len(), graph.node_count(), graph.edges().len());
    stage.details = json!({"nodes": graph.node_count(), "dual_edges": graph.edges().len()});
    Ok(())
}

fn train(stage: &mut Stage<'_>) -> Result<()> {
    let net = stage.network()?;
    let graph = stage.graph(&net)?;
    let split = stage.split()?;
    let train = stage.samples(&graph, &split.train)?;
    let val = stage.samples(&graph, &split.validation)?;
    let config = pipeline::model_config(stage.config);
    let t = Instant::now();
    let (model, history) = gnn::train(&config, &MessageGraph::new(&graph), &train, &val)?;
    let elapsed = t.elapsed();
    model.save(stage.output(stage.layout.params()), stage.output(stage.layout.sidecar()))?;
    write_json(&stage.output(stage.layout.file("history.json")), &history)?;
    let best_val = history.val_mse[history.best_epoch - 1];
    println!(
        "trained {} epochs in {:.1} s; best epoch {} (validation MSE {best_val:.4})",
        history.epochs_run(),
        elapsed.as_secs_f64(),
        history.best_epoch
    );
    stage.details = json!({
        "epochs": history.epochs_run(),
        "best_epoch": history.best_epoch,
        "best_val_mse": best_val,
        "model_seed": config.seed,
        "parameters": model.params().scalar_count(),
    });
    Ok(())
}

fn evaluate(stage: &mut Stage<'_>) -> Result<()> {
    let net = stage.network()?;
    let graph = stage.graph(&net)?;
    let scenarios = stage.scenarios()?;
    let split = stage.split()?;
    let model = stage.model()?;
    let test = stage.samples(&graph, &split.test)?;
    let ev = pipeline::evaluate(&model, &net, &graph, &test, &scenarios)?;
    ev.report.write_csv(stage.output(stage.layout.file("report.csv")))?;
    let text = ev.report.to_text();
    std::fs::write(stage.output(stage.layout.file("report.txt")), &text)?;
    std::fs::write(stage.output(stage.layout.file("scenario_metrics.csv")), scenario_metrics_csv(&ev.per_scenario))?;
    print!("{text}");
    if !ev.report.omitted.is_empty() {
        eprintln!("warning: no roads in subsets {:?}", ev.report.omitted);
    }
    stage.details = json!({"test_scenarios": test.len(), "omitted_subsets": ev.report.omitted});
    Ok(())
}

fn predict(stage: &mut Stage<'_>, requested: &[String]) -> Result<()> {
    let net = stage.network()?;
    let graph = stage.graph(&net)?;
    let scenarios = stage.scenarios()?;
    let ids = pick(stage, requested, &scenarios)?;
    let model = stage.model()?;
    let samples = stage.samples(&graph, &ids)?;
    let mg = MessageGraph::new(&graph);
    ensure_dir(&stage.layout.root.join("predictions"))?;
    let mut table = String::from("scenario_id,predicted_mse,r2,duration_s\n");
    let mut rows = Vec::new();
    for s in &samples {
        let (pred, duration) = model.predict(&mg, &s.features)?;
        write_volumes(&net, &graph.to_segment_order(&pred), stage.output(stage.layout.prediction(&s.id)))?;
        let mse = predicted_mse(&s.targets, &pred)?;
        let r2 = r_squared(&s.targets, &pred).ok();
        let r2_text = r2.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        println!("{}: MSE {mse:.4}, R² {r2_text}, inference {:.3} ms", s.id, duration.as_secs_f64() * 1e3);
        table.push_str(&format!(
            "{},{mse:.17e},{},{:.9e}\n",
            s.id,
            r2.map(|v| format!("{v:.17e}")).unwrap_or_default(),
            duration.as_secs_f64()
        ));
        rows.push(json!({"id": s.id, "mse": mse, "r2": r2, "duration_s": duration.as_secs_f64()}));
    }
    std::fs::write(stage.output(stage.layout.file("predict.csv")), table)?;
    stage.details = json!({"scenarios": rows});
    Ok(())
}

fn export(stage: &mut Stage<'_>, requested: &[String]) -> Result<()> {
    let net = stage.network()?;
    let scenarios = stage.scenarios()?;
    let ids = pick(stage, requested, &scenarios)?;
    let base = read_volumes(&net, stage.input(stage.layout.base(), "simulate")?)?;
    let by_id: HashMap<&str, &Scenario> = scenarios.iter().map(|s| (s.id.as_str(), s)).collect();
    let predictor = if stage.layout.params().is_file() {
        let graph = stage.graph(&net)?;
        Some((stage.model()?, graph))
    } else {
        None
    };
    ensure_dir(&stage.layout.root.join("maps"))?;
    for id in &ids {
        let scenario = by_id.get(id.as_str()).ok_or_else(|| Error::Validation(format!("unknown scenario {id}")))?;
        let treated = treated_segments(&net, &scenario.policy)?;
        let actual = read_volumes(&net, stage.input(stage.layout.target(id), "simulate")?)?;
        export_map(&net, &actual, &base, &treated, stage.output(stage.layout.map(id, "actual")))?;
        if let Some((model, graph)) = &predictor {
            let sample = stage.samples(graph, std::slice::from_ref(id))?.remove(0);
            let (pred, _) = model.predict(&MessageGraph::new(graph), &sample.features)?;
            let per_segment = graph.to_segment_order(&pred);
            export_map(&net, &per_segment, &base, &treated, stage.output(stage.layout.map(id, "predicted")))?;
        }
    }
    println!("maps: {} scenarios{}", ids.len(), if predictor.is_some() { " (actual and predicted)" } else { "" });
    stage.details = json!({"scenarios": ids, "predicted": predictor.is_some()});
    Ok(())
}
