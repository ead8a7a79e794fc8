//! CSV files shared between pipeline stages: per-segment volumes and targets,
//! per-scenario samples and the dual topology.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::dual::{DualGraph, FeatureMatrix, POSITION_WIDTH, STATIC_WIDTH};
use crate::network::RoadNetwork;
use crate::{Error, Result};

/// `{:.16e}` keeps 17 significant digits, enough to round-trip any f64.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_num(field: &str, record: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse { record: record.into(), message: format!("{field:?}: {e}") })
}

fn expect_header(reader: &mut csv::Reader<std::fs::File>, expected: &[String], file: &str) -> Result<()> {
    let got: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Parse {
            record: format!("{file} header"),
            message: format!("expected {expected:?}, found {got:?}"),
        });
    }
    Ok(())
}

fn segment_lookup(net: &RoadNetwork) -> HashMap<&str, usize> {
    net.segments().iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
}

/// Writes `segment_id,value` in network segment order.
pub fn write_volumes(net: &RoadNetwork, values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    if values.len() != net.segment_count() {
        return Err(Error::Shape(format!("{} values for {} segments", values.len(), net.segment_count())));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "segment_id,value")?;
    for (seg, v) in net.segments().iter().zip(values) {
        writeln!(w, "{},{}", seg.id, num(*v))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a volumes file back into network segment order. Every segment must
/// appear exactly once.
pub fn read_volumes(net: &RoadNetwork, path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let lookup = segment_lookup(net);
    let mut reader = csv::Reader::from_path(path)?;
    expect_header(&mut reader, &["segment_id".into(), "value".into()], "volumes")?;
    let mut out = vec![None; net.segment_count()];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let record = format!("volumes row {}", i + 1);
        let &s = lookup.get(&rec[0]).ok_or_else(|| Error::Parse {
            record: record.clone(),
            message: format!("unknown segment {}", &rec[0]),
        })?;
        if out[s].replace(parse_num(&rec[1], &record)?).is_some() {
            return Err(Error::Parse { record, message: format!("segment {} repeated", &rec[0]) });
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(s, v)| v.ok_or_else(|| Error::Data(format!("volumes file misses segment {}", net.segments()[s].id))))
        .collect()
}

pub fn sample_header() -> Vec<String> {
    let mut h = vec!["segment_id".to_string()];
    h.extend((0..STATIC_WIDTH).map(|k| format!("static_{k}")));
    h.extend((0..POSITION_WIDTH).map(|k| format!("pos_{k}")));
    h.push("var_0".into());
    h.push("y".into());
    h
}

/// One row per dual node in node order: raw features and the target.
pub fn write_sample(graph: &DualGraph, features: &FeatureMatrix, y: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let n = graph.node_count();
    if features.rows() != n || y.len() != n {
        return Err(Error::Shape(format!("{} feature rows and {} targets for {n} nodes", features.rows(), y.len())));
    }
    if features.is_standardized() {
        return Err(Error::Usage("samples store raw features".into()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", sample_header().join(","))?;
    for i in 0..n {
        let mut fields = vec![graph.node_ids()[i].clone()];
        fields.extend(features.row(i).iter().map(|v| num(*v)));
        fields.push(num(y[i]));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a sample written against `graph`; rows must follow its node order.
pub fn read_sample(graph: &DualGraph, path: impl AsRef<Path>) -> Result<(FeatureMatrix, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path)?;
    expect_header(&mut reader, &sample_header(), "sample")?;
    let (mut st, mut pos, mut var, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let record = format!("sample row {}", i + 1);
        if graph.node_ids().get(i).map(String::as_str) != Some(&rec[0]) {
            return Err(Error::Parse { record, message: format!("segment {} out of node order", &rec[0]) });
        }
        let vals = (1..rec.len()).map(|k| parse_num(&rec[k], &record)).collect::<Result<Vec<f64>>>()?;
        st.push(std::array::from_fn(|k| vals[k]));
        pos.push(std::array::from_fn(|k| vals[STATIC_WIDTH + k]));
        var.push(vals[STATIC_WIDTH + POSITION_WIDTH]);
        y.push(vals[STATIC_WIDTH + POSITION_WIDTH + 1]);
    }
    if y.len() != graph.node_count() {
        return Err(Error::Data(format!("sample has {} rows for {} nodes", y.len(), graph.node_count())));
    }
    Ok((FeatureMatrix::new(st, pos, var)?, y))
}

pub fn write_dual(graph: &DualGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "src_segment,dst_segment")?;
    let ids = graph.node_ids();
    for &(a, b) in graph.edges() {
        writeln!(w, "{},{}", ids[a], ids[b])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dual edge list; nodes are the network's segments in canonical order.
pub fn read_dual(net: &RoadNetwork, path: impl AsRef<Path>) -> Result<DualGraph> {
    let order = net.canonical_order();
    let ids: Vec<String> = order.iter().map(|&s| net.segments()[s].id.clone()).collect();
    let node: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut reader = csv::Reader::from_path(path)?;
    expect_header(&mut reader, &["src_segment".into(), "dst_segment".into()], "dual")?;
    let mut edges = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let find = |k: usize| {
            node.get(&rec[k]).copied().ok_or_else(|| Error::Parse {
                record: format!("dual row {}", i + 1),
                message: format!("unknown segment {}", &rec[k]),
            })
        };
        edges.push((find(0)?, find(1)?));
    }
    DualGraph::from_parts(ids, order, edges)
}
