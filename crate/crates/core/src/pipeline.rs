//! Run configuration and the in-memory experiment: city, demand, base case,
//! scenarios, samples, training and evaluation.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{base_case, generate_demand, simulate_scenario, AssignmentResult, DemandTable, MsaSettings};
use crate::dual::{build_features, to_dual, DualGraph};
use crate::eval::{scenario_metrics, subset_report, ScenarioMetrics, SubsetReport};
use crate::gnn::{self, predict_many, MessageGraph, ModelConfig, Sample, SurrogateModel, TrainingHistory};
use crate::network::{generate_synthetic_city, RoadClass, RoadNetwork};
use crate::scenario::{generate_scenarios, split_dataset, treated_segments, DatasetSplit, Scenario, ScenarioConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub grid_size: usize,
    pub district_count: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { grid_size: 10, district_count: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    pub agent_count: usize,
}

impl Default for DemandConfig {
    fn default() -> Self {
        DemandConfig { agent_count: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Replications averaged into the base case.
    pub base_seed_count: usize,
    pub max_iterations: usize,
    pub gap_tolerance: f64,
    pub sample_fraction: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let msa = MsaSettings::default();
        OracleConfig {
            base_seed_count: 10,
            max_iterations: msa.max_iterations,
            gap_tolerance: msa.gap_tolerance,
            sample_fraction: msa.sample_fraction,
        }
    }
}

impl OracleConfig {
    pub fn msa(&self) -> MsaSettings {
        MsaSettings {
            max_iterations: self.max_iterations,
            gap_tolerance: self.gap_tolerance,
            sample_fraction: self.sample_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let (train, val, test) = crate::scenario::DEFAULT_SPLIT;
        SplitConfig { train, val, test }
    }
}

/// Everything a run needs, as one JSON document. Missing keys take the
/// desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub demand: DemandConfig,
    pub scenarios: ScenarioConfig,
    pub oracle: OracleConfig,
    pub model: ModelConfig,
    pub split: SplitConfig,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            network: NetworkConfig::default(),
            demand: DemandConfig::default(),
            scenarios: ScenarioConfig::default(),
            oracle: OracleConfig::default(),
            model: ModelConfig { hidden_dim: 32, ..ModelConfig::default() },
            split: SplitConfig::default(),
            output_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Parse { record: "run config".into(), message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.network.grid_size < 2 {
            return bad(format!("network.grid_size must be at least 2, got {}", self.network.grid_size));
        }
        if self.network.district_count == 0 {
            return bad("network.district_count must be positive".into());
        }
        if self.demand.agent_count == 0 {
            return bad("demand.agent_count must be positive".into());
        }
        if self.oracle.base_seed_count == 0 {
            return bad("oracle.base_seed_count must be positive".into());
        }
        if self.oracle.max_iterations == 0 || !(self.oracle.gap_tolerance > 0.0) {
            return bad("oracle.max_iterations and oracle.gap_tolerance must be positive".into());
        }
        if !(self.oracle.sample_fraction > 0.0 && self.oracle.sample_fraction <= 1.0) {
            return bad(format!("oracle.sample_fraction {} outside (0, 1]", self.oracle.sample_fraction));
        }
        let s = &self.scenarios;
        if s.count == 0 || s.seeds_per_scenario == 0 {
            return bad("scenarios.count and scenarios.seeds_per_scenario must be positive".into());
        }
        if !(s.reduction >= 0.0 && s.reduction <= 1.0) {
            return bad(format!("scenarios.reduction {} outside [0, 1]", s.reduction));
        }
        if !(s.mean_size.is_finite() && s.sd_size >= 0.0) {
            return bad("scenarios.mean_size must be finite and scenarios.sd_size non-negative".into());
        }
        let r = &self.split;
        if !(r.train > 0.0 && r.val > 0.0 && r.test > 0.0) || (r.train + r.val + r.test - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios must be positive and sum to 1, got {r:?}"));
        }
        self.model.validate().map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split.train, self.split.val, self.split.test)
    }
}

/// Independent seed for one pipeline stage.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Network,
    Demand,
    BaseSeeds,
    Scenarios,
    Split,
    Model,
}

pub fn build_network(config: &RunConfig) -> Result<RoadNetwork> {
    generate_synthetic_city(
        config.network.grid_size,
        config.network.district_count,
        stage_seed(config.seed, Stage::Network),
    )
}

pub fn build_demand(config: &RunConfig, net: &RoadNetwork) -> Result<DemandTable> {
    generate_demand(net, config.demand.agent_count, stage_seed(config.seed, Stage::Demand))
}

pub fn base_seeds(config: &RunConfig) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, Stage::BaseSeeds));
    let mut seeds = Vec::with_capacity(config.oracle.base_seed_count);
    while seeds.len() < config.oracle.base_seed_count {
        let s = rng.next_u64();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

pub fn build_base(config: &RunConfig, net: &RoadNetwork, demand: &DemandTable) -> Result<AssignmentResult> {
    base_case(net, demand, &base_seeds(config), config.oracle.msa())
}

pub fn build_scenarios(config: &RunConfig, net: &RoadNetwork) -> Result<Vec<Scenario>> {
    generate_scenarios(&config.scenarios, net.district_count(), stage_seed(config.seed, Stage::Scenarios))
}

pub fn build_split(config: &RunConfig, scenarios: &[Scenario]) -> Result<DatasetSplit> {
    let ids: Vec<String> = scenarios.iter().map(|s| s.id.clone()).collect();
    split_dataset(&ids, config.split_ratios(), stage_seed(config.seed, Stage::Split))
}

/// Model config with the run's derived seed.
pub fn model_config(config: &RunConfig) -> ModelConfig {
    ModelConfig { seed: stage_seed(config.seed, Stage::Model) ^ config.model.seed, ..config.model.clone() }
}

/// Targets of every scenario (network segment order), run concurrently.
/// The result order follows `scenarios`.
pub fn simulate_all(
    net: &RoadNetwork,
    demand: &DemandTable,
    base: &AssignmentResult,
    scenarios: &[Scenario],
    settings: MsaSettings,
) -> Result<Vec<Vec<f64>>> {
    scenarios.par_iter().map(|s| simulate_scenario(net, s, demand, base, settings)).collect()
}

/// Raw-feature samples in dual node order.
pub fn build_samples(
    net: &RoadNetwork,
    graph: &DualGraph,
    base: &AssignmentResult,
    scenarios: &[Scenario],
    targets: &[Vec<f64>],
) -> Result<Vec<Sample>> {
    if scenarios.len() != targets.len() {
        return Err(Error::Shape(format!("{} scenarios vs {} target vectors", scenarios.len(), targets.len())));
    }
    scenarios
        .iter()
        .zip(targets)
        .map(|(s, y)| {
            if y.len() != net.segment_count() {
                return Err(Error::Shape(format!("scenario {}: {} targets", s.id, y.len())));
            }
            Ok(Sample {
                id: s.id.clone(),
                features: build_features(net, &s.policy, base)?,
                targets: graph.to_node_order(y),
            })
        })
        .collect()
}

/// Splits samples by id into (train, validation, test).
pub fn partition(samples: &[Sample], split: &DatasetSplit) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let pick = |ids: &[String]| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Data(format!("split references unknown scenario {id}")))
            })
            .collect()
    };
    Ok((pick(&split.train)?, pick(&split.validation)?, pick(&split.test)?))
}

/// Road class and policy flag of each dual node for one scenario.
pub fn node_labels(net: &RoadNetwork, graph: &DualGraph, scenario: &Scenario) -> Result<(Vec<RoadClass>, Vec<bool>)> {
    let treated: BTreeSet<usize> = treated_segments(net, &scenario.policy)?;
    let segs = graph.node_segments();
    Ok((
        segs.iter().map(|&s| net.segments()[s].road_class).collect(),
        segs.iter().map(|s| treated.contains(s)).collect(),
    ))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Pooled over all evaluated scenarios.
    pub report: SubsetReport,
    pub per_scenario: Vec<ScenarioMetrics>,
    /// Predictions in node order, aligned with the evaluated samples.
    pub predictions: Vec<Vec<f64>>,
    pub durations: Vec<Duration>,
}

pub fn evaluate(
    model: &SurrogateModel,
    net: &RoadNetwork,
    graph: &DualGraph,
    samples: &[Sample],
    scenarios: &[Scenario],
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Parameter("nothing to evaluate".into()));
    }
    let by_id: HashMap<&str, &Scenario> = scenarios.iter().map(|s| (s.id.as_str(), s)).collect();
    let mg = MessageGraph::new(graph);
    let outputs = predict_many(model, &mg, samples)?;
    let (mut y, mut y_hat, mut classes, mut treated) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut per_scenario = Vec::with_capacity(samples.len());
    for (sample, (pred, _)) in samples.iter().zip(&outputs) {
        let scenario = by_id
            .get(sample.id.as_str())
            .ok_or_else(|| Error::Data(format!("no scenario for sample {}", sample.id)))?;
        let (c, t) = node_labels(net, graph, scenario)?;
        per_scenario.push(scenario_metrics(&sample.id, &sample.targets, pred)?);
        y.extend_from_slice(&sample.targets);
        y_hat.extend_from_slice(pred);
        classes.extend(c);
        treated.extend(t);
    }
    let (predictions, durations) = outputs.into_iter().unzip();
    Ok(Evaluation { report: subset_report(&y, &y_hat, &classes, &treated)?, per_scenario, predictions, durations })
}

/// All artifacts of one in-memory run.
pub struct Experiment {
    pub net: RoadNetwork,
    pub demand: DemandTable,
    pub base: AssignmentResult,
    pub graph: DualGraph,
    pub scenarios: Vec<Scenario>,
    pub split: DatasetSplit,
    pub samples: Vec<Sample>,
    pub model: SurrogateModel,
    pub history: TrainingHistory,
    pub evaluation: Evaluation,
}

/// Generates data, trains on the train split and evaluates on the test split.
pub fn run_experiment(config: &RunConfig) -> Result<Experiment> {
    config.validate()?;
    let net = build_network(config)?;
    let demand = build_demand(config, &net)?;
    let base = build_base(config, &net, &demand)?;
    let graph = to_dual(&net);
    let scenarios = build_scenarios(config, &net)?;
    let split = build_split(config, &scenarios)?;
    let targets = simulate_all(&net, &demand, &base, &scenarios, config.oracle.msa())?;
    let samples = build_samples(&net, &graph, &base, &scenarios, &targets)?;
    let (train, val, test) = partition(&samples, &split)?;
    let (model, history) = gnn::train(&model_config(config), &MessageGraph::new(&graph), &train, &val)?;
    let evaluation = evaluate(&model, &net, &graph, &test, &scenarios)?;
    Ok(Experiment { net, demand, base, graph, scenarios, split, samples, model, history, evaluation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = RunConfig::default();
        assert_eq!((c.network.grid_size, c.network.district_count), (10, 8));
        assert_eq!(c.demand.agent_count, 2000);
        assert_eq!(c.scenarios.count, 200);
        assert_eq!(c.oracle.base_seed_count, 10);
        assert_eq!(c.scenarios.seeds_per_scenario, 3);
        assert_eq!(c.model.hidden_dim, 32);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        let partial = RunConfig::from_json(r#"{"seed": 7, "demand": {"agent_count": 50}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.demand.agent_count, 50);
        assert_eq!(partial.network, NetworkConfig::default());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Parse { .. })));
        let e = RunConfig::from_json(r#"{"split": {"train": 0.5, "val": 0.2, "test": 0.2}}"#).unwrap_err();
        assert!(e.is_validation(), "{e}");
        let e = RunConfig::from_json(r#"{"model": {"hidden_dim": 30, "transformer_heads": 4}}"#).unwrap_err();
        assert!(e.is_validation(), "{e}");
    }

    #[test]
    fn stage_seeds_differ() {
        let stages = [Stage::Network, Stage::Demand, Stage::BaseSeeds, Stage::Scenarios, Stage::Split, Stage::Model];
        let seeds: BTreeSet<u64> = stages.iter().map(|&s| stage_seed(3, s)).collect();
        assert_eq!(seeds.len(), stages.len());
        assert_eq!(stage_seed(3, Stage::Demand), stage_seed(3, Stage::Demand));
    }

    #[test]
    fn tiny_experiment_runs_end_to_end() {
        let mut c = RunConfig::default();
        c.network = NetworkConfig { grid_size: 4, district_count: 3 };
        c.demand.agent_count = 100;
        c.oracle.base_seed_count = 2;
        c.oracle.max_iterations = 10;
        c.scenarios.count = 10;
        c.scenarios.mean_size = 1.5;
        c.scenarios.seeds_per_scenario = 1;
        c.model = ModelConfig { hidden_dim: 8, transformer_heads: 2, max_epochs: 3, ..ModelConfig::default() };
        let exp = run_experiment(&c).unwrap();
        assert_eq!(exp.samples.len(), 10);
        assert_eq!(exp.evaluation.per_scenario.len(), exp.split.test.len());
        assert!(exp.evaluation.report.row(crate::eval::Subset::All).is_some());
        assert_eq!(exp.history.train_mse.len(), 3);
    }
}
