//! Primal road network: intersections, directed road segments and districts.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spacing between neighbouring lattice intersections, in meters.
pub const GRID_SPACING_M: f64 = 250.0;

/// Road classification, ordered from the highest-capacity class down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RoadClass {
    Trunk,
    Primary,
    Secondary,
    Tertiary,
    Residential,
}

impl RoadClass {
    pub const ALL: [RoadClass; 5] = [
        RoadClass::Trunk,
        RoadClass::Primary,
        RoadClass::Secondary,
        RoadClass::Tertiary,
        RoadClass::Residential,
    ];

    /// Vehicles per hour.
    pub fn capacity(self) -> f64 {
        match self {
            RoadClass::Trunk => 2000.0,
            RoadClass::Primary => 1500.0,
            RoadClass::Secondary => 1000.0,
            RoadClass::Tertiary => 600.0,
            RoadClass::Residential => 300.0,
        }
    }

    /// Posted speed in meters per second.
    pub fn speed_limit(self) -> f64 {
        let kmh = match self {
            RoadClass::Trunk => 70.0,
            RoadClass::Primary => 50.0,
            RoadClass::Secondary => 50.0,
            RoadClass::Tertiary => 40.0,
            RoadClass::Residential => 30.0,
        };
        kmh / 3.6
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoadClass::Trunk => "Trunk",
            RoadClass::Primary => "Primary",
            RoadClass::Secondary => "Secondary",
            RoadClass::Tertiary => "Tertiary",
            RoadClass::Residential => "Residential",
        }
    }

    pub fn parse(s: &str) -> Result<RoadClass> {
        RoadClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown road class {s:?}")))
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: String,
    #[serde(rename = "from")]
    pub from_node: String,
    #[serde(rename = "to")]
    pub to_node: String,
    #[serde(rename = "length_m")]
    pub length: f64,
    pub capacity: f64,
    #[serde(rename = "speed_ms")]
    pub speed_limit: f64,
    #[serde(rename = "class")]
    pub road_class: RoadClass,
    pub district: Option<usize>,
}

impl RoadSegment {
    /// Travel time at the posted speed, in seconds.
    pub fn free_flow_time(&self) -> f64 {
        self.length / self.speed_limit
    }
}

/// A directed street graph. Segments refer to intersections by id; the
/// positional lookup tables are rebuilt on construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork", into = "RawNetwork")]
pub struct RoadNetwork {
    district_count: usize,
    intersections: Vec<Intersection>,
    segments: Vec<RoadSegment>,
    // derived
    from_idx: Vec<usize>,
    to_idx: Vec<usize>,
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.district_count == other.district_count
            && self.intersections == other.intersections
            && self.segments == other.segments
    }
}

#[derive(Serialize, Deserialize)]
struct RawNetwork {
    district_count: usize,
    intersections: Vec<Intersection>,
    segments: Vec<RoadSegment>,
}

impl TryFrom<RawNetwork> for RoadNetwork {
    type Error = Error;
    fn try_from(raw: RawNetwork) -> Result<Self> {
        RoadNetwork::new(raw.district_count, raw.intersections, raw.segments)
    }
}

impl From<RoadNetwork> for RawNetwork {
    fn from(net: RoadNetwork) -> Self {
        RawNetwork {
            district_count: net.district_count,
            intersections: net.intersections,
            segments: net.segments,
        }
    }
}

impl RoadNetwork {
    /// Builds a network and checks its structural invariants.
    pub fn new(
        district_count: usize,
        intersections: Vec<Intersection>,
        segments: Vec<RoadSegment>,
    ) -> Result<Self> {
        if district_count == 0 {
            return Err(Error::Validation("district_count must be positive".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::with_capacity(intersections.len());
        for (i, node) in intersections.iter().enumerate() {
            if !node.x.is_finite() || !node.y.is_finite() {
                return Err(Error::Validation(format!(
                    "intersection {} has non-finite coordinates",
                    node.id
                )));
            }
            if index.insert(node.id.as_str(), i).is_some() {
                return Err(Error::Validation(format!("duplicate intersection id {}", node.id)));
            }
        }
        let mut seen = HashSet::with_capacity(segments.len());
        let mut from_idx = Vec::with_capacity(segments.len());
        let mut to_idx = Vec::with_capacity(segments.len());
        for seg in &segments {
            if !seen.insert(seg.id.as_str()) {
                return Err(Error::Validation(format!("duplicate segment id {}", seg.id)));
            }
            let lookup = |node: &str| {
                index.get(node).copied().ok_or_else(|| {
                    Error::Validation(format!(
                        "segment {} references unknown intersection {node}",
                        seg.id
                    ))
                })
            };
            let (from, to) = (lookup(&seg.from_node)?, lookup(&seg.to_node)?);
            if from == to {
                return Err(Error::Validation(format!("segment {} is a self-loop", seg.id)));
            }
            for (name, value) in [
                ("length", seg.length),
                ("capacity", seg.capacity),
                ("speed limit", seg.speed_limit),
            ] {
                if !(value.is_finite() && value > 0.0) {
                    return Err(Error::Validation(format!(
                        "segment {} has non-positive {name} ({value})",
                        seg.id
                    )));
                }
            }
            if let Some(d) = seg.district {
                if d >= district_count {
                    return Err(Error::Validation(format!(
                        "segment {} has district {d} but district_count is {district_count}",
                        seg.id
                    )));
                }
            }
            from_idx.push(from);
            to_idx.push(to);
        }
        Ok(RoadNetwork { district_count, intersections, segments, from_idx, to_idx })
    }

    pub fn district_count(&self) -> usize {
        self.district_count
    }

    pub fn intersections(&self) -> &[Intersection] {
        &self.intersections
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn node_count(&self) -> usize {
        self.intersections.len()
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Position of the segment's tail intersection.
    pub fn from_index(&self, seg: usize) -> usize {
        self.from_idx[seg]
    }

    /// Position of the segment's head intersection.
    pub fn to_index(&self, seg: usize) -> usize {
        self.to_idx[seg]
    }

    pub fn intersection_index(&self, id: &str) -> Option<usize> {
        self.intersections.iter().position(|n| n.id == id)
    }

    /// Segment positions sorted by segment id. This is the node order of the
    /// dual graph and of every feature matrix.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.segments.len()).collect();
        order.sort_by(|&a, &b| self.segments[a].id.cmp(&self.segments[b].id));
        order
    }

    /// For each segment position, its rank in [`canonical_order`](Self::canonical_order).
    pub fn canonical_rank(&self) -> Vec<usize> {
        let mut rank = vec![0; self.segments.len()];
        for (r, s) in self.canonical_order().into_iter().enumerate() {
            rank[s] = r;
        }
        rank
    }

    /// Outgoing segment positions per intersection, in segment order.
    pub fn out_segments(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.intersections.len()];
        for (s, &from) in self.from_idx.iter().enumerate() {
            out[from].push(s);
        }
        out
    }

    /// Returns a copy with per-segment capacities replaced.
    pub fn with_capacities(&self, capacities: &[f64]) -> Result<RoadNetwork> {
        if capacities.len() != self.segments.len() {
            return Err(Error::Parameter(format!(
                "expected {} capacities, got {}",
                self.segments.len(),
                capacities.len()
            )));
        }
        let mut net = self.clone();
        for (seg, &cap) in net.segments.iter_mut().zip(capacities) {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(Error::Validation(format!("segment {} capacity {cap}", seg.id)));
            }
            seg.capacity = cap;
        }
        Ok(net)
    }

    fn reachable(&self, start: usize, forward: bool) -> Vec<bool> {
        let mut adj = vec![Vec::new(); self.intersections.len()];
        for s in 0..self.segments.len() {
            let (a, b) = (self.from_idx[s], self.to_idx[s]);
            if forward {
                adj[a].push(b);
            } else {
                adj[b].push(a);
            }
        }
        let mut seen = vec![false; adj.len()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    }

    pub fn is_strongly_connected(&self) -> bool {
        if self.intersections.is_empty() {
            return false;
        }
        self.reachable(0, true).into_iter().all(|r| r)
            && self.reachable(0, false).into_iter().all(|r| r)
    }

    /// Structural checks plus strong connectivity, as required before assignment.
    pub fn validate_for_assignment(&self) -> Result<()> {
        if !self.is_strongly_connected() {
            return Err(Error::Validation("network is not strongly connected".into()));
        }
        Ok(())
    }
}

/// Generates an `n × n` lattice city with classed roads and k-means districts.
pub fn generate_synthetic_city(grid_size: usize, district_count: usize, seed: u64) -> Result<RoadNetwork> {
    if grid_size < 3 {
        return Err(Error::Parameter(format!("grid_size must be at least 3, got {grid_size}")));
    }
    if district_count == 0 || district_count > grid_size * grid_size {
        return Err(Error::Parameter(format!(
            "district_count must be in [1, {}], got {district_count}",
            grid_size * grid_size
        )));
    }
    let n = grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let node_width = digits(n * n);
    let intersections: Vec<Intersection> = (0..n * n)
        .map(|i| Intersection {
            id: format!("n{:0w$}", i, w = node_width),
            x: (i % n) as f64 * GRID_SPACING_M,
            y: (i / n) as f64 * GRID_SPACING_M,
        })
        .collect();

    let row_class = line_classes(n, &mut rng, true);
    let col_class = line_classes(n, &mut rng, false);
    let district_of_node = kmeans_districts(&intersections, district_count, &mut rng);

    let seg_width = digits(4 * n * (n - 1));
    let mut segments = Vec::with_capacity(4 * n * (n - 1));
    let push = |a: usize, b: usize, class: RoadClass, segments: &mut Vec<RoadSegment>| {
        let id = format!("s{:0w$}", segments.len(), w = seg_width);
        segments.push(RoadSegment {
            id,
            from_node: intersections[a].id.clone(),
            to_node: intersections[b].id.clone(),
            length: GRID_SPACING_M,
            capacity: class.capacity(),
            speed_limit: class.speed_limit(),
            road_class: class,
            district: Some(district_of_node[a]),
        });
    };
    for r in 0..n {
        for c in 0..n - 1 {
            let (a, b) = (r * n + c, r * n + c + 1);
            push(a, b, row_class[r], &mut segments);
            push(b, a, row_class[r], &mut segments);
        }
    }
    for c in 0..n {
        for r in 0..n - 1 {
            let (a, b) = (r * n + c, (r + 1) * n + c);
            push(a, b, col_class[c], &mut segments);
            push(b, a, col_class[c], &mut segments);
        }
    }
    RoadNetwork::new(district_count, intersections.clone(), segments)
}

fn digits(count: usize) -> usize {
    count.saturating_sub(1).max(1).to_string().len()
}

/// Classes for the rows (or columns) of the lattice. The ring lines are
/// Primary. The rows get the single Trunk corridor on a random interior line;
/// columns get a Primary arterial instead. Other interior lines draw from
/// Secondary / Tertiary / Residential.
fn line_classes(n: usize, rng: &mut ChaCha8Rng, rows: bool) -> Vec<RoadClass> {
    let mut classes = vec![RoadClass::Residential; n];
    classes[0] = RoadClass::Primary;
    classes[n - 1] = RoadClass::Primary;
    let mut interior: Vec<usize> = (1..n - 1).collect();
    interior.shuffle(rng);
    let mut rest = interior.into_iter();
    if let Some(line) = rest.next() {
        classes[line] = if rows { RoadClass::Trunk } else { RoadClass::Primary };
    }
    for line in rest {
        let u: f64 = rng.random();
        classes[line] = if u < 0.3 {
            RoadClass::Secondary
        } else if u < 0.6 {
            RoadClass::Tertiary
        } else {
            RoadClass::Residential
        };
    }
    classes
}

fn kmeans_districts(nodes: &[Intersection], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut init: Vec<usize> = (0..nodes.len()).collect();
    init.shuffle(rng);
    let mut centroids: Vec<(f64, f64)> = init[..k].iter().map(|&i| (nodes[i].x, nodes[i].y)).collect();
    let mut assignment = vec![usize::MAX; nodes.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, node) in nodes.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &(cx, cy)) in centroids.iter().enumerate() {
                let d = (node.x - cx).powi(2) + (node.y - cy).powi(2);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (i, node) in nodes.iter().enumerate() {
            let s = &mut sums[assignment[i]];
            s.0 += node.x;
            s.1 += node.y;
            s.2 += 1;
        }
        for (c, s) in sums.into_iter().enumerate() {
            if s.2 > 0 {
                centroids[c] = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    assignment
}

/// Positions of the segments whose district is in `districts`.
pub fn segments_in_districts(net: &RoadNetwork, districts: &BTreeSet<usize>) -> Result<BTreeSet<usize>> {
    if let Some(&d) = districts.iter().find(|&&d| d >= net.district_count()) {
        return Err(Error::Parameter(format!(
            "district {d} out of range (district_count {})",
            net.district_count()
        )));
    }
    Ok(net
        .segments()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.district.is_some_and(|d| districts.contains(&d)))
        .map(|(i, _)| i)
        .collect())
}

pub fn save_network(net: &RoadNetwork, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(net)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a network file, reporting which record failed to parse.
pub fn load_network(path: impl AsRef<Path>) -> Result<RoadNetwork> {
    let text = std::fs::read_to_string(path)?;
    parse_network(&text)
}

pub fn parse_network(text: &str) -> Result<RoadNetwork> {
    let root: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        record: "network file".into(),
        message: e.to_string(),
    })?;
    let field = |name: &str| {
        root.get(name).ok_or_else(|| Error::Parse {
            record: "network file".into(),
            message: format!("missing field {name:?}"),
        })
    };
    let district_count: usize =
        serde_json::from_value(field("district_count")?.clone()).map_err(|e| Error::Parse {
            record: "district_count".into(),
            message: e.to_string(),
        })?;
    let intersections = parse_records::<Intersection>(field("intersections")?, "intersections")?;
    let segments = parse_records::<RoadSegment>(field("segments")?, "segments")?;
    RoadNetwork::new(district_count, intersections, segments)
}

fn parse_records<T: serde::de::DeserializeOwned>(value: &serde_json::Value, name: &str) -> Result<Vec<T>> {
    let items = value.as_array().ok_or_else(|| Error::Parse {
        record: name.into(),
        message: "expected an array".into(),
    })?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            serde_json::from_value(item.clone()).map_err(|e| Error::Parse {
                record: format!("{name}[{i}]"),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Vec<Intersection>, Vec<RoadSegment>) {
        let nodes = vec![
            Intersection { id: "a".into(), x: 0.0, y: 0.0 },
            Intersection { id: "b".into(), x: 100.0, y: 0.0 },
        ];
        let seg = |id: &str, f: &str, t: &str| RoadSegment {
            id: id.into(),
            from_node: f.into(),
            to_node: t.into(),
            length: 100.0,
            capacity: 600.0,
            speed_limit: 10.0,
            road_class: RoadClass::Tertiary,
            district: Some(0),
        };
        (nodes, vec![seg("ab", "a", "b"), seg("ba", "b", "a")])
    }

    #[test]
    fn grid_counts() {
        let net = generate_synthetic_city(10, 4, 0).unwrap();
        assert_eq!(net.node_count(), 100);
        assert_eq!(net.segment_count(), 360);
        assert!(net.is_strongly_connected());
    }

    #[test]
    fn segment_count_formula_holds_for_several_sizes() {
        for n in 3..9 {
            let net = generate_synthetic_city(n, 2, n as u64).unwrap();
            assert_eq!(net.segment_count(), 4 * n * (n - 1));
        }
    }

    #[test]
    fn single_district() {
        let net = generate_synthetic_city(3, 1, 7).unwrap();
        assert!(net.segments().iter().all(|s| s.district == Some(0)));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = serde_json::to_string(&generate_synthetic_city(10, 4, 0).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_synthetic_city(10, 4, 0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn has_trunk_and_capacities_follow_class() {
        for seed in 0..10 {
            let net = generate_synthetic_city(5, 3, seed).unwrap();
            assert!(net.segments().iter().any(|s| s.road_class == RoadClass::Trunk));
            for s in net.segments() {
                assert_eq!(s.capacity, s.road_class.capacity());
                assert!(s.district.unwrap() < 3);
            }
        }
    }

    #[test]
    fn segment_district_is_from_node_district() {
        let net = generate_synthetic_city(6, 4, 3).unwrap();
        let mut node_district: HashMap<&str, usize> = HashMap::new();
        for s in net.segments() {
            let d = s.district.unwrap();
            if let Some(prev) = node_district.insert(s.from_node.as_str(), d) {
                assert_eq!(prev, d, "segments leaving {} disagree", s.from_node);
            }
        }
    }

    #[test]
    fn invalid_sizes() {
        assert!(matches!(generate_synthetic_city(2, 1, 0), Err(Error::Parameter(_))));
        assert!(matches!(generate_synthetic_city(3, 0, 0), Err(Error::Parameter(_))));
        assert!(matches!(generate_synthetic_city(3, 10, 0), Err(Error::Parameter(_))));
        assert!(generate_synthetic_city(3, 9, 0).is_ok());
    }

    #[test]
    fn unknown_intersection_rejected() {
        let (nodes, mut segs) = tiny();
        segs[0].to_node = "zzz".into();
        assert!(matches!(RoadNetwork::new(1, nodes, segs), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_capacity_rejected() {
        let (nodes, mut segs) = tiny();
        segs[1].capacity = 0.0;
        assert!(matches!(RoadNetwork::new(1, nodes, segs), Err(Error::Validation(_))));
    }

    #[test]
    fn out_of_range_district_rejected() {
        let (nodes, mut segs) = tiny();
        segs[1].district = Some(1);
        assert!(RoadNetwork::new(1, nodes, segs).is_err());
    }

    #[test]
    fn parse_error_names_record() {
        let text = r#"{"district_count": 1,
            "intersections": [{"id": "a", "x": 0, "y": 0}, {"id": "b", "x": 1}],
            "segments": []}"#;
        match parse_network(text) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, "intersections[1]"),
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"district_count": 1,
            "intersections": [{"id": "a", "x": 0, "y": 0}, {"id": "b", "x": 1, "y": 0}],
            "segments": [{"id": "s", "from": "a", "to": "b", "length_m": 1, "capacity": 1,
                          "speed_ms": 1, "class": "Motorway", "district": 0}]}"#;
        match parse_network(text) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, "segments[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn districts_filter() {
        let net = generate_synthetic_city(10, 4, 0).unwrap();
        let all: BTreeSet<usize> = (0..4).collect();
        assert_eq!(segments_in_districts(&net, &all).unwrap().len(), net.segment_count());
        assert!(segments_in_districts(&net, &BTreeSet::new()).unwrap().is_empty());

        let picked = segments_in_districts(&net, &BTreeSet::from([0])).unwrap();
        let mut brute = BTreeSet::new();
        for i in 0..net.segment_count() {
            if net.segments()[i].district == Some(0) {
                brute.insert(i);
            }
        }
        assert_eq!(picked, brute);
        assert!(!picked.is_empty());
        assert!(matches!(
            segments_in_districts(&net, &BTreeSet::from([4])),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn class_strings_are_exact() {
        for c in RoadClass::ALL {
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(json, format!("\"{}\"", c.as_str()));
            assert_eq!(RoadClass::parse(c.as_str()).unwrap(), c);
        }
    }
}
