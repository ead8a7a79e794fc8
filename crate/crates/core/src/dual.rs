//! Dual (line) graph of a road network and the per-segment feature matrix.

use serde::{Deserialize, Serialize};

use crate::assign::AssignmentResult;
use crate::error::{Error, Result};
use crate::network::RoadNetwork;
use crate::scenario::{treated_segments, Policy};

pub const STATIC_WIDTH: usize = 4;
pub const POSITION_WIDTH: usize = 4;
/// Width of the concatenated static, positional and variable features.
pub const FEATURE_WIDTH: usize = STATIC_WIDTH + POSITION_WIDTH + 1;

/// Segments as nodes, with an edge `a → b` whenever `b` continues `a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualGraph {
    node_ids: Vec<String>,
    /// Network segment position of every dual node.
    node_segment: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

impl DualGraph {
    /// Builds a dual graph from explicit parts, checking edge endpoints.
    pub fn from_parts(node_ids: Vec<String>, node_segment: Vec<usize>, edges: Vec<(usize, usize)>) -> Result<Self> {
        if node_ids.len() != node_segment.len() {
            return Err(Error::Data("node id and segment tables differ in length".into()));
        }
        let n = node_ids.len();
        if let Some(e) = edges.iter().find(|(a, b)| *a >= n || *b >= n) {
            return Err(Error::Index(format!("dual edge {e:?} outside {n} nodes")));
        }
        Ok(DualGraph { node_ids, node_segment, edges })
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_segments(&self) -> &[usize] {
        &self.node_segment
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Reorders a per-segment vector (network order) into node order.
    pub fn to_node_order(&self, per_segment: &[f64]) -> Vec<f64> {
        self.node_segment.iter().map(|&s| per_segment[s]).collect()
    }

    /// Inverse of [`to_node_order`](Self::to_node_order).
    pub fn to_segment_order(&self, per_node: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; per_node.len()];
        for (node, &s) in self.node_segment.iter().enumerate() {
            out[s] = per_node[node];
        }
        out
    }
}

/// Line graph without immediate u-turns. Nodes follow the canonical segment
/// order; edges are listed by source node, then target node.
pub fn to_dual(net: &RoadNetwork) -> DualGraph {
    let order = net.canonical_order();
    let rank = net.canonical_rank();
    let out = net.out_segments();
    let mut edges = Vec::new();
    for (a_node, &a) in order.iter().enumerate() {
        let mut targets: Vec<usize> = out[net.to_index(a)]
            .iter()
            .filter(|&&b| net.to_index(b) != net.from_index(a))
            .map(|&b| rank[b])
            .collect();
        targets.sort_unstable();
        edges.extend(targets.into_iter().map(|b_node| (a_node, b_node)));
    }
    DualGraph {
        node_ids: order.iter().map(|&s| net.segments()[s].id.clone()).collect(),
        node_segment: order,
        edges,
    }
}

/// Per-node inputs of the surrogate, in dual-graph node order.
///
/// - static: base-case volume, capacity, speed limit, length
/// - positional: start x, start y, end x, end y
/// - variable: applied capacity-reduction fraction (0 when untreated)
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub static_features: Vec<[f64; STATIC_WIDTH]>,
    pub positional: Vec<[f64; POSITION_WIDTH]>,
    pub variable: Vec<f64>,
    standardized: bool,
}

impl FeatureMatrix {
    pub fn new(
        static_features: Vec<[f64; STATIC_WIDTH]>,
        positional: Vec<[f64; POSITION_WIDTH]>,
        variable: Vec<f64>,
    ) -> Result<Self> {
        let n = static_features.len();
        if positional.len() != n || variable.len() != n {
            return Err(Error::Shape(format!(
                "feature blocks disagree: {n} static, {} positional, {} variable rows",
                positional.len(),
                variable.len()
            )));
        }
        let finite = static_features.iter().flatten().chain(positional.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        if let Some(v) = variable.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("variable feature {v} outside [0, 1]")));
        }
        Ok(FeatureMatrix { static_features, positional, variable, standardized: false })
    }

    pub fn rows(&self) -> usize {
        self.variable.len()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// Static and variable columns, row-major `rows × 5`.
    pub fn node_input(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows() * (STATIC_WIDTH + 1));
        for (s, v) in self.static_features.iter().zip(&self.variable) {
            out.extend_from_slice(s);
            out.push(*v);
        }
        out
    }

    /// Positional columns, row-major `rows × 4`.
    pub fn positions(&self) -> Vec<f64> {
        self.positional.iter().flatten().copied().collect()
    }

    /// Full row `static ‖ positional ‖ variable`.
    pub fn row(&self, i: usize) -> [f64; FEATURE_WIDTH] {
        let mut out = [0.0; FEATURE_WIDTH];
        out[..4].copy_from_slice(&self.static_features[i]);
        out[4..8].copy_from_slice(&self.positional[i]);
        out[8] = self.variable[i];
        out
    }
}

/// Assembles the feature matrix for one scenario.
pub fn build_features(net: &RoadNetwork, policy: &Policy, base: &AssignmentResult) -> Result<FeatureMatrix> {
    if base.volumes.len() != net.segment_count() {
        return Err(Error::Data(format!(
            "base case covers {} of {} segments",
            base.volumes.len(),
            net.segment_count()
        )));
    }
    let treated = treated_segments(net, policy)?;
    let order = net.canonical_order();
    let nodes = net.intersections();
    let mut static_features = Vec::with_capacity(order.len());
    let mut positional = Vec::with_capacity(order.len());
    let mut variable = Vec::with_capacity(order.len());
    for &s in &order {
        let seg = &net.segments()[s];
        let (a, b) = (&nodes[net.from_index(s)], &nodes[net.to_index(s)]);
        static_features.push([base.volumes[s], seg.capacity, seg.speed_limit, seg.length]);
        positional.push([a.x, a.y, b.x, b.y]);
        variable.push(if treated.contains(&s) { policy.reduction() } else { 0.0 });
    }
    FeatureMatrix::new(static_features, positional, variable)
}

/// Mean and spread of one standardized quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    fn fit(values: impl Iterator<Item = f64>) -> ColumnStats {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        let values: Vec<f64> = values.collect();
        for &v in &values {
            n += 1;
            sum += v;
        }
        let mean = sum / n as f64;
        for &v in &values {
            sq += (v - mean) * (v - mean);
        }
        let std = (sq / n as f64).sqrt();
        // zero-variance columns are centred but left unscaled
        let std = if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 };
        ColumnStats { mean, std }
    }

    #[inline]
    fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Z-score parameters: one entry per static column, one per coordinate axis
/// (shared by start and end points), and one for the variable column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub static_columns: [ColumnStats; STATIC_WIDTH],
    pub x_axis: ColumnStats,
    pub y_axis: ColumnStats,
    pub variable: ColumnStats,
}

impl Standardizer {
    /// Fits on the training matrices only.
    pub fn fit(training: &[&FeatureMatrix]) -> Result<Standardizer> {
        let rows: usize = training.iter().map(|f| f.rows()).sum();
        if rows < 2 {
            return Err(Error::Parameter(format!("standardizer needs at least 2 rows, got {rows}")));
        }
        if training.iter().any(|f| f.is_standardized()) {
            return Err(Error::Usage("cannot fit a standardizer on standardized features".into()));
        }
        let static_col =
            |c: usize| ColumnStats::fit(training.iter().flat_map(|f| f.static_features.iter().map(move |r| r[c])));
        let axis = |c: usize| {
            ColumnStats::fit(training.iter().flat_map(|f| f.positional.iter().flat_map(move |r| [r[c], r[c + 2]])))
        };
        Ok(Standardizer {
            static_columns: [static_col(0), static_col(1), static_col(2), static_col(3)],
            x_axis: axis(0),
            y_axis: axis(1),
            variable: ColumnStats::fit(training.iter().flat_map(|f| f.variable.iter().copied())),
        })
    }

    pub fn apply(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        if features.is_standardized() {
            return Err(Error::Usage("features are already standardized".into()));
        }
        let static_features = features
            .static_features
            .iter()
            .map(|r| std::array::from_fn(|c| self.static_columns[c].apply(r[c])))
            .collect();
        let positional = features
            .positional
            .iter()
            .map(|r| {
                [self.x_axis.apply(r[0]), self.y_axis.apply(r[1]), self.x_axis.apply(r[2]), self.y_axis.apply(r[3])]
            })
            .collect();
        let variable = features.variable.iter().map(|&v| self.variable.apply(v)).collect();
        Ok(FeatureMatrix { static_features, positional, variable, standardized: true })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_synthetic_city, Intersection, RoadClass, RoadSegment};
    use crate::scenario::build_policy;
    use std::collections::BTreeSet;

    fn seg(id: &str, from: &str, to: &str) -> RoadSegment {
        RoadSegment {
            id: id.into(),
            from_node: from.into(),
            to_node: to.into(),
            length: 1.0,
            capacity: 1.0,
            speed_limit: 1.0,
            road_class: RoadClass::Residential,
            district: Some(0),
        }
    }

    fn nodes(ids: &[&str]) -> Vec<Intersection> {
        ids.iter().enumerate().map(|(i, id)| Intersection { id: id.to_string(), x: i as f64, y: 0.0 }).collect()
    }

    #[test]
    fn chain_has_one_dual_edge() {
        let net = RoadNetwork::new(1, nodes(&["u", "v", "w"]), vec![seg("A", "u", "v"), seg("B", "v", "w")]).unwrap();
        let dual = to_dual(&net);
        assert_eq!(dual.edges(), &[(0, 1)]);
    }

    #[test]
    fn u_turn_excluded() {
        let net = RoadNetwork::new(1, nodes(&["u", "v"]), vec![seg("A", "u", "v"), seg("A'", "v", "u")]).unwrap();
        assert!(to_dual(&net).edges().is_empty());
    }

    #[test]
    fn nodes_follow_sorted_ids() {
        let net =
            RoadNetwork::new(1, nodes(&["u", "v", "w"]), vec![seg("z", "v", "w"), seg("a", "u", "v")]).unwrap();
        let dual = to_dual(&net);
        assert_eq!(dual.node_ids(), &["a".to_string(), "z".to_string()]);
        assert_eq!(dual.node_segments(), &[1, 0]);
        assert_eq!(dual.edges(), &[(0, 1)]);
        let per_seg = vec![10.0, 20.0];
        assert_eq!(dual.to_node_order(&per_seg), vec![20.0, 10.0]);
        assert_eq!(dual.to_segment_order(&dual.to_node_order(&per_seg)), per_seg);
    }

    fn fixture() -> (RoadNetwork, Policy, AssignmentResult) {
        let net = generate_synthetic_city(6, 3, 2).unwrap();
        let policy = build_policy(BTreeSet::from([0, 1]), None, None).unwrap();
        let base = AssignmentResult {
            volumes: (0..net.segment_count()).map(|i| (i % 17) as f64 * 3.5).collect(),
            relative_gap: 0.0,
            iterations: 1,
        };
        (net, policy, base)
    }

    #[test]
    fn features_encode_policy_and_attributes() {
        let (net, policy, base) = fixture();
        let f = build_features(&net, &policy, &base).unwrap();
        let treated = treated_segments(&net, &policy).unwrap();
        let dual = to_dual(&net);
        assert_eq!(f.rows(), dual.node_count());
        for (node, &s) in dual.node_segments().iter().enumerate() {
            let seg = &net.segments()[s];
            let expected = if treated.contains(&s) { 0.5 } else { 0.0 };
            assert_eq!(f.variable[node], expected);
            assert_eq!(f.static_features[node], [base.volumes[s], seg.capacity, seg.speed_limit, seg.length]);
            let from = &net.intersections()[net.from_index(s)];
            assert_eq!(f.positional[node][0], from.x);
        }
        assert!(f.variable.contains(&0.5));
        assert_eq!(f, build_features(&net, &policy, &base).unwrap());
    }

    #[test]
    fn missing_base_volume_is_a_data_error() {
        let (net, policy, mut base) = fixture();
        base.volumes.pop();
        assert!(matches!(build_features(&net, &policy, &base), Err(Error::Data(_))));
    }

    #[test]
    fn standardizer_zscores_training_data() {
        let (net, policy, base) = fixture();
        let f = build_features(&net, &policy, &base).unwrap();
        let s = Standardizer::fit(&[&f]).unwrap();
        let z = s.apply(&f).unwrap();
        assert!(z.is_standardized());
        let n = z.rows() as f64;
        let check = |vals: Vec<f64>, constant: bool| {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-9, "mean {m}");
            if constant {
                assert!(sd < 1e-12);
            } else {
                assert!((sd - 1.0).abs() < 1e-9, "std {sd}");
            }
        };
        check(z.static_features.iter().map(|r| r[0]).collect(), false);
        check(z.static_features.iter().map(|r| r[1]).collect(), false);
        // every grid segment is 250 m long
        check(z.static_features.iter().map(|r| r[3]).collect(), true);
        assert_eq!(s.static_columns[3].std, 1.0);
        check(z.positional.iter().flat_map(|r| [r[0], r[2]]).collect(), false);
        check(z.positional.iter().flat_map(|r| [r[1], r[3]]).collect(), false);
        check(z.variable.clone(), false);
        assert!(n > 2.0);
        assert!(s.apply(&z).is_err());
    }

    #[test]
    fn standardizer_needs_rows() {
        assert!(matches!(Standardizer::fit(&[]), Err(Error::Parameter(_))));
    }
}
