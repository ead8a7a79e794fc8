//! GeoJSON map of per-segment volume changes.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::{json, Value};

use crate::network::RoadNetwork;
use crate::{Error, Result};

pub const PCT_FLOOR_VEHICLES: f64 = 1.0;
pub const PCT_MIN: f64 = -100.0;
pub const PCT_MAX: f64 = 500.0;

/// Percent change relative to the base volume, floored at one vehicle and
/// clamped for display.
pub fn change_pct(change: f64, base: f64) -> f64 {
    (100.0 * change / base.max(PCT_FLOOR_VEHICLES)).clamp(PCT_MIN, PCT_MAX)
}

/// One LineString feature per segment. `values` and `base` are indexed by
/// network segment position; coordinates are the planar intersection
/// coordinates in metres.
pub fn feature_collection(
    net: &RoadNetwork,
    values: &[f64],
    base: &[f64],
    treated: &BTreeSet<usize>,
) -> Result<Value> {
    let n = net.segment_count();
    if values.len() != n || base.len() != n {
        return Err(Error::Shape(format!(
            "{} values and {} base volumes for {n} segments",
            values.len(),
            base.len()
        )));
    }
    let nodes = net.intersections();
    let features: Vec<Value> = net
        .segments()
        .iter()
        .enumerate()
        .map(|(s, seg)| {
            let (a, b) = (&nodes[net.from_index(s)], &nodes[net.to_index(s)]);
            json!({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[a.x, a.y], [b.x, b.y]]},
                "properties": {
                    "segment_id": seg.id,
                    "change_abs": values[s],
                    "change_pct": change_pct(values[s], base[s]),
                    "road_class": seg.road_class.as_str(),
                    "treated": treated.contains(&s),
                },
            })
        })
        .collect();
    Ok(json!({"type": "FeatureCollection", "features": features}))
}

pub fn export_map(
    net: &RoadNetwork,
    values: &[f64],
    base: &[f64],
    treated: &BTreeSet<usize>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let fc = feature_collection(net, values, base, treated)?;
    std::fs::write(path, serde_json::to_string(&fc)?)?;
    Ok(())
}
