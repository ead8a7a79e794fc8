//! Ground-truth traffic oracle.
//!
//! Link volumes come from a static assignment: BPR travel times, all-or-nothing
//! loading onto shortest paths and the method of successive averages (MSA).
//! Each replication perturbs free-flow times with seeded noise in
//! `[0.95, 1.05]`, so different seeds give slightly different equilibria and
//! the base case is an average over replications.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::RoadNetwork;
use crate::scenario::{apply_policy, Scenario};

pub const BPR_ALPHA: f64 = 0.15;
pub const BPR_BETA: i32 = 4;
/// Length scale of the destination attraction kernel, meters.
pub const ATTRACTION_SCALE_M: f64 = 2000.0;
pub const ATTRACTOR_COUNT: usize = 3;
const NOISE_LOW: f64 = 0.95;
const NOISE_HIGH: f64 = 1.05;
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    /// Intersection position in the network.
    pub origin: usize,
    pub destination: usize,
    pub count: f64,
}

/// Origin-destination demand over intersections of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandTable {
    trips: Vec<Trip>,
}

impl DemandTable {
    pub fn new(net: &RoadNetwork, trips: Vec<Trip>) -> Result<Self> {
        for t in &trips {
            if t.origin >= net.node_count() || t.destination >= net.node_count() {
                return Err(Error::Validation(format!(
                    "trip {} -> {} references an unknown intersection",
                    t.origin, t.destination
                )));
            }
            if !(t.count.is_finite() && t.count > 0.0) {
                return Err(Error::Validation(format!("trip count {} is not positive", t.count)));
            }
        }
        let table = DemandTable { trips };
        if !(table.total() > 0.0) {
            return Err(Error::Validation("demand table is empty".into()));
        }
        Ok(table)
    }

    pub fn trips(&self) -> &[Trip] {
        &self.trips
    }

    pub fn total(&self) -> f64 {
        self.trips.iter().map(|t| t.count).sum()
    }
}

/// Samples `agent_count` trips. Origins are uniform over intersections;
/// destinations are drawn with weight `Σ_a exp(−d(j, a) / 2000 m)` around three
/// seed-chosen attractor intersections. Identical pairs are merged.
pub fn generate_demand(net: &RoadNetwork, agent_count: usize, seed: u64) -> Result<DemandTable> {
    if agent_count == 0 {
        return Err(Error::Parameter("agent_count must be at least 1".into()));
    }
    let nodes = net.intersections();
    if nodes.len() < 2 {
        return Err(Error::Parameter("demand needs at least two intersections".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attractors = rand::seq::index::sample(&mut rng, nodes.len(), ATTRACTOR_COUNT.min(nodes.len()));
    let weights: Vec<f64> = nodes
        .iter()
        .map(|n| {
            attractors
                .iter()
                .map(|a| {
                    let d = ((n.x - nodes[a].x).powi(2) + (n.y - nodes[a].y).powi(2)).sqrt();
                    (-d / ATTRACTION_SCALE_M).exp()
                })
                .sum()
        })
        .collect();
    let dest_dist = rand::distr::weighted::WeightedIndex::new(&weights)
        .map_err(|e| Error::Parameter(e.to_string()))?;

    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for _ in 0..agent_count {
        let origin = rng.random_range(0..nodes.len());
        let destination = loop {
            let d = rng.sample(&dest_dist);
            if d != origin {
                break d;
            }
        };
        *pairs.entry((origin, destination)).or_insert(0.0) += 1.0;
    }
    let trips = pairs
        .into_iter()
        .map(|((origin, destination), count)| Trip { origin, destination, count })
        .collect();
    DemandTable::new(net, trips)
}

#[derive(Serialize, Deserialize)]
struct TripRecord {
    origin: String,
    destination: String,
    count: f64,
}

pub fn save_demand(net: &RoadNetwork, demand: &DemandTable, path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<TripRecord> = demand
        .trips
        .iter()
        .map(|t| TripRecord {
            origin: net.intersections()[t.origin].id.clone(),
            destination: net.intersections()[t.destination].id.clone(),
            count: t.count,
        })
        .collect();
    let doc = serde_json::json!({ "trips": records });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_demand(net: &RoadNetwork, path: impl AsRef<Path>) -> Result<DemandTable> {
    #[derive(Deserialize)]
    struct Doc {
        trips: Vec<TripRecord>,
    }
    let doc: Doc = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Parse {
        record: "demand file".into(),
        message: e.to_string(),
    })?;
    let index: std::collections::HashMap<&str, usize> =
        net.intersections().iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let trips = doc
        .trips
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let lookup = |id: &str| {
                index.get(id).copied().ok_or_else(|| Error::Parse {
                    record: format!("trips[{i}]"),
                    message: format!("unknown intersection {id}"),
                })
            };
            Ok(Trip { origin: lookup(&r.origin)?, destination: lookup(&r.destination)?, count: r.count })
        })
        .collect::<Result<Vec<_>>>()?;
    DemandTable::new(net, trips)
}

/// BPR volume-delay function `t₀ · (1 + 0.15 · (v/c)⁴)`.
pub fn bpr_travel_time(free_flow_time: f64, volume: f64, capacity: f64) -> Result<f64> {
    if !(capacity > 0.0) {
        return Err(Error::Parameter(format!("capacity must be positive, got {capacity}")));
    }
    Ok(bpr(free_flow_time, volume, capacity))
}

#[inline]
fn bpr(t0: f64, v: f64, c: f64) -> f64 {
    t0 * (1.0 + BPR_ALPHA * (v / c).powi(BPR_BETA))
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Precomputed topology shared by all shortest-path calls on one network.
struct Router {
    out: Vec<Vec<usize>>,
    to: Vec<usize>,
    rank: Vec<usize>,
}

impl Router {
    fn new(net: &RoadNetwork) -> Self {
        Router {
            out: net.out_segments(),
            to: (0..net.segment_count()).map(|s| net.to_index(s)).collect(),
            rank: net.canonical_rank(),
        }
    }

    /// Ranks of the segments on the current path to `node`, origin first.
    fn path_ranks(&self, pred: &[usize], node: usize, from: &[usize]) -> Vec<usize> {
        let mut ranks = Vec::new();
        let mut v = node;
        while pred[v] != usize::MAX {
            let s = pred[v];
            ranks.push(self.rank[s]);
            v = from[s];
        }
        ranks.reverse();
        ranks
    }

    /// Shortest-time tree from `origin`; returns the predecessor segment of
    /// every node. Among equal-time paths the one whose sequence of canonical
    /// segment ranks is lexicographically smallest wins.
    fn tree(&self, origin: usize, times: &[f64], from: &[usize]) -> Vec<usize> {
        let n = self.out.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[origin] = 0.0;
        heap.push(HeapItem { dist: 0.0, node: origin });
        while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            for &s in &self.out[u] {
                let v = self.to[s];
                if done[v] {
                    continue;
                }
                let nd = d + times[s];
                let cur = dist[v];
                let better = if nd < cur * (1.0 - TIE_TOLERANCE) {
                    true
                } else if nd <= cur * (1.0 + TIE_TOLERANCE) {
                    let mut candidate = self.path_ranks(&pred, u, from);
                    candidate.push(self.rank[s]);
                    candidate < self.path_ranks(&pred, v, from)
                } else {
                    false
                };
                if better {
                    dist[v] = nd.min(cur);
                    pred[v] = s;
                    heap.push(HeapItem { dist: dist[v], node: v });
                }
            }
        }
        pred
    }
}

/// Loads every origin-destination flow onto its shortest path under `times`.
pub fn all_or_nothing(net: &RoadNetwork, times: &[f64], demand: &DemandTable) -> Result<Vec<f64>> {
    let router = Router::new(net);
    aon_with(&router, net, times, demand)
}

fn aon_with(router: &Router, net: &RoadNetwork, times: &[f64], demand: &DemandTable) -> Result<Vec<f64>> {
    if times.len() != net.segment_count() {
        return Err(Error::Parameter(format!(
            "expected {} travel times, got {}",
            net.segment_count(),
            times.len()
        )));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Parameter(format!("travel times must be positive, got {t}")));
    }
    let from: Vec<usize> = (0..net.segment_count()).map(|s| net.from_index(s)).collect();
    let mut by_origin: BTreeMap<usize, Vec<&Trip>> = BTreeMap::new();
    for t in &demand.trips {
        by_origin.entry(t.origin).or_default().push(t);
    }
    let mut volumes = vec![0.0; net.segment_count()];
    for (&origin, trips) in &by_origin {
        let pred = router.tree(origin, times, &from);
        for trip in trips {
            let mut v = trip.destination;
            if v != origin && pred[v] == usize::MAX {
                return Err(Error::Assignment(format!(
                    "destination {} unreachable from origin {}",
                    net.intersections()[trip.destination].id,
                    net.intersections()[origin].id
                )));
            }
            while v != origin {
                let s = pred[v];
                volumes[s] += trip.count;
                v = from[s];
            }
        }
    }
    Ok(volumes)
}

/// Equilibrium volumes of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// Per network segment position, vehicles per hour.
    pub volumes: Vec<f64>,
    pub relative_gap: f64,
    pub iterations: usize,
}

/// Diagnostics of a single MSA iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub relative_gap: f64,
    /// Trips carried by the current flow (convex weights times loaded demand).
    pub loaded_trips: f64,
    /// Largest node-balance violation `|out − in − (supply − sink)|`.
    pub conservation_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsaSettings {
    pub max_iterations: usize,
    pub gap_tolerance: f64,
    /// Fraction of the travelling population represented by the demand table.
    /// Link capacities are multiplied by it inside the volume-delay function,
    /// the usual treatment of a downsampled agent population.
    pub sample_fraction: f64,
}

pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.05;

impl Default for MsaSettings {
    fn default() -> Self {
        MsaSettings { max_iterations: 100, gap_tolerance: 0.01, sample_fraction: DEFAULT_SAMPLE_FRACTION }
    }
}

impl MsaSettings {
    pub fn new(max_iterations: usize, gap_tolerance: f64) -> Self {
        MsaSettings { max_iterations, gap_tolerance, ..Default::default() }
    }
}

/// Free-flow times with the replication's multiplicative noise applied.
pub fn perturbed_free_flow_times(net: &RoadNetwork, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.segments()
        .iter()
        .map(|s| s.free_flow_time() * rng.random_range(NOISE_LOW..=NOISE_HIGH))
        .collect()
}

pub fn msa_assignment(
    net: &RoadNetwork,
    demand: &DemandTable,
    max_iterations: usize,
    gap_tolerance: f64,
    seed: u64,
) -> Result<AssignmentResult> {
    msa_assignment_traced(net, demand, MsaSettings::new(max_iterations, gap_tolerance), seed).map(|(r, _)| r)
}

/// MSA with a per-iteration trace. Iteration 1 is the all-or-nothing load at
/// free-flow times; iteration `k` reports the gap of the current flow and then
/// moves `1/(k+1)` of the way towards the auxiliary all-or-nothing flow.
pub fn msa_assignment_traced(
    net: &RoadNetwork,
    demand: &DemandTable,
    settings: MsaSettings,
    seed: u64,
) -> Result<(AssignmentResult, Vec<IterationRecord>)> {
    if settings.max_iterations == 0 {
        return Err(Error::Parameter("max_iterations must be at least 1".into()));
    }
    if !(settings.gap_tolerance > 0.0) {
        return Err(Error::Parameter("gap_tolerance must be positive".into()));
    }
    if !(settings.sample_fraction > 0.0 && settings.sample_fraction <= 1.0) {
        return Err(Error::Parameter("sample_fraction must lie in (0, 1]".into()));
    }
    let router = Router::new(net);
    let free_flow = perturbed_free_flow_times(net, seed);
    let capacity: Vec<f64> =
        net.segments().iter().map(|s| s.capacity * settings.sample_fraction).collect();
    let total_demand = demand.total();
    let mut balance = vec![0.0; net.node_count()];
    for t in demand.trips() {
        balance[t.origin] += t.count;
        balance[t.destination] -= t.count;
    }

    let mut volumes = aon_with(&router, net, &free_flow, demand)?;
    let mut loaded = total_demand;
    let mut trace = Vec::new();
    let mut times = vec![0.0; volumes.len()];
    let mut k = 1;
    loop {
        for s in 0..volumes.len() {
            times[s] = bpr(free_flow[s], volumes[s], capacity[s]);
        }
        let auxiliary = aon_with(&router, net, &times, demand)?;
        let current_cost: f64 = volumes.iter().zip(&times).map(|(v, t)| v * t).sum();
        let shortest_cost: f64 = auxiliary.iter().zip(&times).map(|(v, t)| v * t).sum();
        let gap = (current_cost - shortest_cost).abs() / current_cost;
        trace.push(IterationRecord {
            iteration: k,
            relative_gap: gap,
            loaded_trips: loaded,
            conservation_residual: conservation_residual(net, &volumes, &balance),
        });
        if gap <= settings.gap_tolerance || k >= settings.max_iterations {
            return Ok((AssignmentResult { volumes, relative_gap: gap, iterations: k }, trace));
        }
        let step = 1.0 / (k + 1) as f64;
        for (v, a) in volumes.iter_mut().zip(&auxiliary) {
            *v += step * (a - *v);
        }
        loaded += step * (total_demand - loaded);
        k += 1;
    }
}

fn conservation_residual(net: &RoadNetwork, volumes: &[f64], balance: &[f64]) -> f64 {
    let mut net_out = vec![0.0; net.node_count()];
    for (s, v) in volumes.iter().enumerate() {
        net_out[net.from_index(s)] += v;
        net_out[net.to_index(s)] -= v;
    }
    net_out.iter().zip(balance).map(|(o, b)| (o - b).abs()).fold(0.0, f64::max)
}

/// Runs one replication per seed and averages volumes and gaps. Seeds run in
/// parallel; the reduction follows the seed order.
pub fn averaged_assignment(
    net: &RoadNetwork,
    demand: &DemandTable,
    seeds: &[u64],
    settings: MsaSettings,
) -> Result<AssignmentResult> {
    if seeds.is_empty() {
        return Err(Error::Parameter("at least one seed is required".into()));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| msa_assignment_traced(net, demand, settings, seed).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let mut volumes = vec![0.0; net.segment_count()];
    for run in &runs {
        for (acc, v) in volumes.iter_mut().zip(&run.volumes) {
            *acc += v;
        }
    }
    volumes.iter_mut().for_each(|v| *v /= n);
    Ok(AssignmentResult {
        volumes,
        relative_gap: runs.iter().map(|r| r.relative_gap).sum::<f64>() / n,
        iterations: runs.iter().map(|r| r.iterations).max().unwrap_or(0),
    })
}

/// The no-policy reference: average equilibrium over `seeds`.
pub fn base_case(
    net: &RoadNetwork,
    demand: &DemandTable,
    seeds: &[u64],
    settings: MsaSettings,
) -> Result<AssignmentResult> {
    averaged_assignment(net, demand, seeds, settings)
}

/// Change in car volume per segment, vehicles per hour.
pub type TargetVector = Vec<f64>;

/// Applies the scenario's policy, averages the replications over the
/// scenario's seeds, and differences against the base case.
pub fn simulate_scenario(
    net: &RoadNetwork,
    scenario: &Scenario,
    demand: &DemandTable,
    base: &AssignmentResult,
    settings: MsaSettings,
) -> Result<TargetVector> {
    if base.volumes.len() != net.segment_count() {
        return Err(Error::Data(format!(
            "base case has {} volumes for {} segments",
            base.volumes.len(),
            net.segment_count()
        )));
    }
    let treated = apply_policy(net, &scenario.policy)?;
    let policy_run = averaged_assignment(&treated, demand, &scenario.seeds, settings)?;
    Ok(policy_run.volumes.iter().zip(&base.volumes).map(|(p, b)| p - b).collect())
}
