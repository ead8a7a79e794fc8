//! Policy scenarios: district sampling, capacity reductions and dataset splits.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{segments_in_districts, RoadClass, RoadNetwork};

pub const DEFAULT_REDUCTION: f64 = 0.5;
pub const DEFAULT_MEAN_SIZE: f64 = 5.0;
pub const DEFAULT_SD_SIZE: f64 = 2.0;
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.8, 0.15, 0.05);

/// Capacity floor used when a policy closes a road completely.
pub const CLOSED_CAPACITY: f64 = 1.0;

pub fn default_classes() -> BTreeSet<RoadClass> {
    BTreeSet::from([RoadClass::Primary, RoadClass::Secondary, RoadClass::Tertiary])
}

/// A capacity reduction applied to some road classes inside a set of districts.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    districts: BTreeSet<usize>,
    reduction: f64,
    affected_classes: BTreeSet<RoadClass>,
}

impl Policy {
    pub fn districts(&self) -> &BTreeSet<usize> {
        &self.districts
    }

    pub fn reduction(&self) -> f64 {
        self.reduction
    }

    pub fn affected_classes(&self) -> &BTreeSet<RoadClass> {
        &self.affected_classes
    }

    fn check_network(&self, net: &RoadNetwork) -> Result<()> {
        match self.districts.iter().find(|&&d| d >= net.district_count()) {
            Some(d) => Err(Error::Parameter(format!(
                "policy district {d} unknown to network with {} districts",
                net.district_count()
            ))),
            None => Ok(()),
        }
    }
}

/// Builds a policy, falling back to a 50% cut on Primary/Secondary/Tertiary roads.
pub fn build_policy(
    districts: BTreeSet<usize>,
    reduction: Option<f64>,
    classes: Option<BTreeSet<RoadClass>>,
) -> Result<Policy> {
    let reduction = reduction.unwrap_or(DEFAULT_REDUCTION);
    let affected_classes = classes.unwrap_or_else(default_classes);
    if districts.is_empty() {
        return Err(Error::Parameter("policy needs at least one district".into()));
    }
    if !(reduction > 0.0 && reduction <= 1.0) {
        return Err(Error::Parameter(format!("reduction must lie in (0, 1], got {reduction}")));
    }
    if affected_classes.is_empty() {
        return Err(Error::Parameter("policy needs at least one road class".into()));
    }
    Ok(Policy { districts, reduction, affected_classes })
}

/// Segment positions whose capacity the policy modifies.
pub fn treated_segments(net: &RoadNetwork, policy: &Policy) -> Result<BTreeSet<usize>> {
    policy.check_network(net)?;
    let in_districts = segments_in_districts(net, &policy.districts)?;
    Ok(in_districts
        .into_iter()
        .filter(|&s| policy.affected_classes.contains(&net.segments()[s].road_class))
        .collect())
}

/// Returns a copy of `net` with the policy's capacity cut applied. A full
/// closure keeps a capacity of [`CLOSED_CAPACITY`] so travel times stay finite.
pub fn apply_policy(net: &RoadNetwork, policy: &Policy) -> Result<RoadNetwork> {
    let treated = treated_segments(net, policy)?;
    let capacities: Vec<f64> = net
        .segments()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if treated.contains(&i) && policy.reduction >= 1.0 {
                CLOSED_CAPACITY
            } else if treated.contains(&i) {
                s.capacity * (1.0 - policy.reduction)
            } else {
                s.capacity
            }
        })
        .collect();
    net.with_capacities(&capacities)
}

/// Maps a raw normal draw to a combination size: round half away from zero,
/// then clamp to `[1, district_count]`.
pub fn combination_size(raw: f64, district_count: usize) -> usize {
    let rounded = raw.round();
    if rounded < 1.0 {
        1
    } else {
        (rounded as usize).min(district_count)
    }
}

/// Draws a district combination whose size follows a rounded, clamped normal.
pub fn sample_district_combination(
    rng_seed: u64,
    district_count: usize,
    mean_size: f64,
    sd_size: f64,
) -> Result<BTreeSet<usize>> {
    if district_count == 0 {
        return Err(Error::Parameter("district_count must be positive".into()));
    }
    if !(mean_size > 0.0) || !(sd_size >= 0.0) || !sd_size.is_finite() {
        return Err(Error::Parameter(format!(
            "invalid size distribution N({mean_size}, {sd_size})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(mean_size, sd_size).map_err(|e| Error::Parameter(e.to_string()))?;
    let size = combination_size(normal.sample(&mut rng), district_count);
    Ok(index::sample(&mut rng, district_count, size).into_iter().collect())
}

/// One simulation input: a policy plus the oracle seeds to average over.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub policy: Policy,
    pub seeds: Vec<u64>,
}

impl Scenario {
    pub fn new(id: impl Into<String>, policy: Policy, seeds: Vec<u64>) -> Result<Self> {
        let id = id.into();
        if seeds.is_empty() {
            return Err(Error::Parameter(format!("scenario {id} has no seeds")));
        }
        let distinct: HashSet<u64> = seeds.iter().copied().collect();
        if distinct.len() != seeds.len() {
            return Err(Error::Parameter(format!("scenario {id} repeats a seed")));
        }
        Ok(Scenario { id, policy, seeds })
    }
}

#[derive(Serialize, Deserialize)]
struct ScenarioRecord {
    id: String,
    districts: Vec<usize>,
    reduction: f64,
    classes: Vec<RoadClass>,
    seeds: Vec<u64>,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        ScenarioRecord {
            id: s.id.clone(),
            districts: s.policy.districts.iter().copied().collect(),
            reduction: s.policy.reduction,
            classes: s.policy.affected_classes.iter().copied().collect(),
            seeds: s.seeds.clone(),
        }
    }
}

impl TryFrom<ScenarioRecord> for Scenario {
    type Error = Error;
    fn try_from(r: ScenarioRecord) -> Result<Self> {
        let policy = build_policy(
            r.districts.into_iter().collect(),
            Some(r.reduction),
            Some(r.classes.into_iter().collect()),
        )?;
        Scenario::new(r.id, policy, r.seeds)
    }
}

/// Scenario generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub count: usize,
    pub mean_size: f64,
    pub sd_size: f64,
    pub reduction: f64,
    pub classes: Vec<RoadClass>,
    pub seeds_per_scenario: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            count: 200,
            mean_size: DEFAULT_MEAN_SIZE,
            sd_size: DEFAULT_SD_SIZE,
            reduction: DEFAULT_REDUCTION,
            classes: default_classes().into_iter().collect(),
            seeds_per_scenario: 3,
        }
    }
}

/// Generates `config.count` scenarios for a city with `district_count` districts.
/// Scenario `i` derives its combination and its oracle seeds from `seed` and `i`.
pub fn generate_scenarios(config: &ScenarioConfig, district_count: usize, seed: u64) -> Result<Vec<Scenario>> {
    let width = config.count.saturating_sub(1).max(1).to_string().len();
    let classes: BTreeSet<RoadClass> = config.classes.iter().copied().collect();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..config.count)
        .map(|i| {
            let combo_seed: u64 = rand::Rng::random(&mut master);
            let districts =
                sample_district_combination(combo_seed, district_count, config.mean_size, config.sd_size)?;
            let policy = build_policy(districts, Some(config.reduction), Some(classes.clone()))?;
            let mut seeds = Vec::with_capacity(config.seeds_per_scenario);
            while seeds.len() < config.seeds_per_scenario {
                let s: u64 = rand::Rng::random(&mut master);
                if !seeds.contains(&s) {
                    seeds.push(s);
                }
            }
            Scenario::new(format!("sc{:0w$}", i, w = width), policy, seeds)
        })
        .collect()
}

pub fn save_scenarios(scenarios: &[Scenario], path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<ScenarioRecord> = scenarios.iter().map(ScenarioRecord::from).collect();
    std::fs::write(path, serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: "scenario file".into(),
        message: e.to_string(),
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let record: ScenarioRecord = serde_json::from_value(v).map_err(|e| Error::Parse {
                record: format!("scenarios[{i}]"),
                message: e.to_string(),
            })?;
            Scenario::try_from(record)
        })
        .collect()
}

/// Disjoint train / validation / test partition of scenario ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    #[serde(rename = "val")]
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles ids with `seed` and cuts them into contiguous train/validation/test
/// blocks. Validation and test sizes are rounded; the remainder goes to train.
pub fn split_dataset(scenario_ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = scenario_ids.len();
    if n < 3 {
        return Err(Error::Parameter(format!("need at least 3 scenarios to split, got {n}")));
    }
    let mut ids = scenario_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * va).round() as usize).max(1);
    let n_test = ((n as f64 * te).round() as usize).max(1);
    let n_train = n.checked_sub(n_val + n_test).filter(|&t| t > 0).ok_or_else(|| {
        Error::Parameter(format!("{n} scenarios cannot honour ratios {ratios:?}"))
    })?;
    let test = ids.split_off(n_train + n_val);
    let validation = ids.split_off(n_train);
    Ok(DatasetSplit { train: ids, validation, test })
}
