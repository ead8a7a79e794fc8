//! Library results checked against independent brute-force implementations.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use surroflow::assign::{all_or_nothing, DemandTable, Trip};
use surroflow::dual::to_dual;
use surroflow::eval::{subset_report, Subset};
use surroflow::export::feature_collection;
use surroflow::network::{generate_synthetic_city, Intersection, RoadClass, RoadNetwork, RoadSegment};

fn segment(id: String, from: usize, to: usize, class: RoadClass) -> RoadSegment {
    RoadSegment {
        id,
        from_node: format!("n{from}"),
        to_node: format!("n{to}"),
        length: 100.0,
        capacity: class.capacity(),
        speed_limit: class.speed_limit(),
        road_class: class,
        district: None,
    }
}

/// Random directed multigraph without self-loops. With `ring`, a directed
/// cycle through all nodes keeps it strongly connected.
fn random_network(rng: &mut ChaCha8Rng, nodes: usize, extra: usize, ring: bool) -> RoadNetwork {
    let intersections = (0..nodes)
        .map(|i| Intersection { id: format!("n{i}"), x: rng.random_range(0.0..1000.0), y: rng.random_range(0.0..1000.0) })
        .collect();
    let mut pairs = Vec::new();
    if ring {
        pairs.extend((0..nodes).map(|i| (i, (i + 1) % nodes)));
    }
    while pairs.len() < extra + if ring { nodes } else { 0 } {
        let (a, b) = (rng.random_range(0..nodes), rng.random_range(0..nodes));
        if a != b {
            pairs.push((a, b));
        }
    }
    // shuffled ids so network order and canonical order differ
    let mut ids: Vec<usize> = (0..pairs.len()).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let segments = pairs
        .iter()
        .zip(&ids)
        .map(|(&(a, b), &id)| segment(format!("s{id:03}"), a, b, RoadClass::ALL[id % 5]))
        .collect();
    RoadNetwork::new(1, intersections, segments).unwrap()
}

/// Every simple path from `o` to `d` as a list of segment positions.
fn simple_paths(net: &RoadNetwork, o: usize, d: usize) -> Vec<Vec<usize>> {
    fn walk(net: &RoadNetwork, at: usize, d: usize, seen: &mut Vec<bool>, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if at == d {
            out.push(path.clone());
            return;
        }
        for s in 0..net.segment_count() {
            let next = net.to_index(s);
            if net.from_index(s) == at && !seen[next] {
                seen[next] = true;
                path.push(s);
                walk(net, next, d, seen, path, out);
                path.pop();
                seen[next] = false;
            }
        }
    }
    let mut seen = vec![false; net.node_count()];
    seen[o] = true;
    let mut out = Vec::new();
    walk(net, o, d, &mut seen, &mut Vec::new(), &mut out);
    out
}

#[test]
fn all_or_nothing_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..40 {
        let nodes = rng.random_range(3..7);
        let extra = rng.random_range(2..8);
        let net = random_network(&mut rng, nodes, extra, true);
        // integer times make equal-cost paths common, exercising the tie-break
        let integer = case % 2 == 0;
        let times: Vec<f64> = (0..net.segment_count())
            .map(|_| if integer { rng.random_range(1..4) as f64 } else { rng.random_range(1.0..10.0) })
            .collect();
        let trips: Vec<Trip> = (0..5)
            .map(|_| {
                let o = rng.random_range(0..nodes);
                let mut d = rng.random_range(0..nodes);
                while d == o {
                    d = rng.random_range(0..nodes);
                }
                Trip { origin: o, destination: d, count: rng.random_range(1..20) as f64 }
            })
            .collect();
        let demand = DemandTable::new(&net, trips.clone()).unwrap();
        let got = all_or_nothing(&net, &times, &demand).unwrap();

        let rank = net.canonical_rank();
        let mut expected = vec![0.0; net.segment_count()];
        for t in &trips {
            let best = simple_paths(&net, t.origin, t.destination)
                .into_iter()
                .map(|p| {
                    let cost: f64 = p.iter().map(|&s| times[s]).sum();
                    let key: Vec<usize> = p.iter().map(|&s| rank[s]).collect();
                    (cost, key, p)
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)))
                .unwrap();
            for s in best.2 {
                expected[s] += t.count;
            }
        }
        assert_eq!(got, expected, "case {case}");
    }
}

/// Pair scan over all segment pairs: `a → b` when b starts where a ends and
/// does not lead straight back to a's start.
fn pair_scan(net: &RoadNetwork) -> BTreeSet<(String, String)> {
    let segs = net.segments();
    let mut out = BTreeSet::new();
    for a in 0..segs.len() {
        for b in 0..segs.len() {
            if segs[a].to_node == segs[b].from_node && segs[b].to_node != segs[a].from_node {
                out.insert((segs[a].id.clone(), segs[b].id.clone()));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn dual_graph_matches_pair_scan(seed in any::<u64>(), nodes in 2usize..12, extra in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, nodes, extra.min(50), false);
        prop_assert!(net.segment_count() <= 50);
        let dual = to_dual(&net);
        let ids = dual.node_ids();
        let mut sorted: Vec<String> = net.segments().iter().map(|s| s.id.clone()).collect();
        sorted.sort();
        prop_assert_eq!(ids, &sorted[..]);
        let got: BTreeSet<(String, String)> =
            dual.edges().iter().map(|&(a, b)| (ids[a].clone(), ids[b].clone())).collect();
        prop_assert_eq!(got.len(), dual.edges().len());
        prop_assert_eq!(got, pair_scan(&net));
    }
}

/// Structural GeoJSON rules for a FeatureCollection of LineStrings.
fn check_geojson(doc: &Value) -> Result<usize, String> {
    if doc.get("type") != Some(&Value::from("FeatureCollection")) {
        return Err("top-level type must be FeatureCollection".into());
    }
    let features = doc.get("features").and_then(Value::as_array).ok_or("features must be an array")?;
    for (i, f) in features.iter().enumerate() {
        if f.get("type") != Some(&Value::from("Feature")) {
            return Err(format!("feature {i}: type must be Feature"));
        }
        let g = f.get("geometry").ok_or(format!("feature {i}: missing geometry"))?;
        if g.get("type") != Some(&Value::from("LineString")) {
            return Err(format!("feature {i}: geometry must be a LineString"));
        }
        let coords = g.get("coordinates").and_then(Value::as_array).ok_or(format!("feature {i}: no coordinates"))?;
        if coords.len() < 2 {
            return Err(format!("feature {i}: a LineString needs two or more positions"));
        }
        for c in coords {
            let pos = c.as_array().ok_or(format!("feature {i}: position is not an array"))?;
            if pos.len() < 2 || !pos.iter().all(|v| v.as_f64().is_some_and(f64::is_finite)) {
                return Err(format!("feature {i}: bad position {c}"));
            }
        }
        if !f.get("properties").is_some_and(Value::is_object) {
            return Err(format!("feature {i}: properties must be an object"));
        }
    }
    Ok(features.len())
}

#[test]
fn exported_map_is_valid_geojson() {
    let net = generate_synthetic_city(10, 8, 0).unwrap();
    let n = net.segment_count();
    let values: Vec<f64> = (0..n).map(|i| (i as f64 - 100.0) * 0.7).collect();
    let base: Vec<f64> = (0..n).map(|i| (i % 50) as f64 * 3.0).collect();
    let treated: BTreeSet<usize> = (0..n).step_by(7).collect();
    let fc = feature_collection(&net, &values, &base, &treated).unwrap();
    // through text, as a consumer would read it
    let doc: Value = serde_json::from_str(&fc.to_string()).unwrap();
    assert_eq!(check_geojson(&doc), Ok(n));
    for (s, f) in doc["features"].as_array().unwrap().iter().enumerate() {
        let p = &f["properties"];
        assert_eq!(p["segment_id"], net.segments()[s].id.as_str());
        assert_eq!(p["treated"], treated.contains(&s));
        let pct = p["change_pct"].as_f64().unwrap();
        assert!((-100.0..=500.0).contains(&pct));
        let expect = (100.0 * values[s] / base[s].max(1.0)).clamp(-100.0, 500.0);
        assert_eq!(pct, expect);
    }
    assert!(check_geojson(&serde_json::json!({"type": "FeatureCollection", "features": [{"type": "Feature"}]})).is_err());
}

#[test]
fn subset_report_matches_one_pass_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 2000;
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-40.0..60.0)).collect();
    let p: Vec<f64> = y.iter().map(|v| v * 0.8 + rng.random_range(-5.0..5.0)).collect();
    let classes: Vec<RoadClass> = (0..n).map(|_| RoadClass::ALL[rng.random_range(0..5)]).collect();
    let treated: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let report = subset_report(&y, &p, &classes, &treated).unwrap();
    for subset in Subset::ALL {
        // textbook one-pass sums: var = E[y²] − E[y]²
        let (mut k, mut sy, mut syy, mut se) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if subset.contains(classes[i], treated[i]) {
                k += 1.0;
                sy += y[i];
                syy += y[i] * y[i];
                se += (y[i] - p[i]) * (y[i] - p[i]);
            }
        }
        let naive = syy / k - (sy / k) * (sy / k);
        let row = report.row(subset).unwrap();
        assert_eq!(row.node_count as f64, k);
        assert!((row.naive_mse - naive).abs() <= 1e-9 * naive);
        assert!((row.predicted_mse - se / k).abs() <= 1e-9 * row.predicted_mse);
        assert!((row.r_squared.unwrap() - (1.0 - (se / k) / naive)).abs() <= 1e-9);
    }
}
