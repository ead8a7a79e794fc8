//! Regression metrics and the per-road-subset report.
//!
//! Every metric on a subset uses that subset's own mean, so
//! `r_squared == 1 - predicted_mse / naive_mse` holds row by row.

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::network::RoadClass;
use crate::{Error, Result};

/// Road subsets reported, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    All,
    Trunk,
    Primary,
    Secondary,
    Tertiary,
    PolicyRoads,
    NonPolicyRoads,
}

impl Subset {
    pub const ALL: [Subset; 7] = [
        Subset::All,
        Subset::Trunk,
        Subset::Primary,
        Subset::Secondary,
        Subset::Tertiary,
        Subset::PolicyRoads,
        Subset::NonPolicyRoads,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::All => "All",
            Subset::Trunk => "Trunk",
            Subset::Primary => "Primary",
            Subset::Secondary => "Secondary",
            Subset::Tertiary => "Tertiary",
            Subset::PolicyRoads => "PolicyRoads",
            Subset::NonPolicyRoads => "NonPolicyRoads",
        }
    }

    /// Row label of the text report.
    pub fn label(self) -> &'static str {
        match self {
            Subset::All => "All roads",
            Subset::Trunk => "Trunk roads",
            Subset::Primary => "Primary roads",
            Subset::Secondary => "Secondary roads",
            Subset::Tertiary => "Tertiary roads",
            Subset::PolicyRoads => "Roads with policy in place",
            Subset::NonPolicyRoads => "Roads without policy in place",
        }
    }

    pub fn parse(s: &str) -> Result<Subset> {
        Subset::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parse { record: "subset".into(), message: format!("unknown subset {s:?}") })
    }

    pub fn contains(self, class: RoadClass, treated: bool) -> bool {
        match self {
            Subset::All => true,
            Subset::Trunk => class == RoadClass::Trunk,
            Subset::Primary => class == RoadClass::Primary,
            Subset::Secondary => class == RoadClass::Secondary,
            Subset::Tertiary => class == RoadClass::Tertiary,
            Subset::PolicyRoads => treated,
            Subset::NonPolicyRoads => !treated,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn mean(y: &[f64]) -> f64 {
    y.iter().sum::<f64>() / y.len() as f64
}

fn check_aligned(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    Ok(())
}

/// MSE of the constant subset-mean predictor (population variance).
pub fn naive_mse(y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Parameter("naive_mse of an empty subset".into()));
    }
    let m = mean(y);
    Ok(y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64)
}

pub fn predicted_mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_aligned(y, y_hat)?;
    if y.is_empty() {
        return Err(Error::Parameter("predicted_mse of an empty subset".into()));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// `1 - predicted / naive`, the identity every report row satisfies.
pub fn r_squared_from_mse(predicted_mse: f64, naive_mse: f64) -> Result<f64> {
    if !(naive_mse > 0.0) || !naive_mse.is_finite() {
        return Err(Error::UndefinedMetric(format!("R² with naive MSE {naive_mse}")));
    }
    Ok(1.0 - predicted_mse / naive_mse)
}

pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_aligned(y, y_hat)?;
    if y.len() < 2 {
        return Err(Error::UndefinedMetric(format!("R² needs at least 2 values, got {}", y.len())));
    }
    let naive = naive_mse(y)?;
    if naive == 0.0 {
        return Err(Error::UndefinedMetric("R² of a constant target".into()));
    }
    r_squared_from_mse(predicted_mse(y, y_hat)?, naive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub subset: Subset,
    /// `None` when the subset target is constant or has a single node.
    pub r_squared: Option<f64>,
    pub naive_mse: f64,
    pub predicted_mse: f64,
    pub node_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub rows: Vec<SubsetRow>,
    /// Subsets with no nodes; they get no row.
    pub omitted: Vec<Subset>,
}

impl SubsetReport {
    pub fn row(&self, subset: Subset) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    /// `subset,r2,naive_mse,predicted_mse,n`; an undefined R² is written as an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,r2,naive_mse,predicted_mse,n\n");
        for r in &self.rows {
            let r2 = r.r_squared.map(|v| format!("{v:.17e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{r2},{:.17e},{:.17e},{}", r.subset, r.naive_mse, r.predicted_mse, r.node_count);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<SubsetReport> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["subset", "r2", "naive_mse", "predicted_mse", "n"] {
            return Err(Error::Parse { record: "report header".into(), message: format!("{headers:?}") });
        }
        let mut report = SubsetReport::default();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = |m: String| Error::Parse { record: format!("report row {}", i + 1), message: m };
            let num = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(format!("column {k}: {e}")));
            report.rows.push(SubsetRow {
                subset: Subset::parse(&rec[0])?,
                r_squared: if rec[1].is_empty() { None } else { Some(num(1)?) },
                naive_mse: num(2)?,
                predicted_mse: num(3)?,
                node_count: rec[4].parse().map_err(|e| bad(format!("n: {e}")))?,
            });
        }
        report.omitted = Subset::ALL.into_iter().filter(|s| report.row(*s).is_none()).collect();
        Ok(report)
    }

    /// Fixed-width text table, one line per subset.
    pub fn to_text(&self) -> String {
        let width = Subset::ALL.iter().map(|s| s.label().len()).max().unwrap_or(0);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>12}  {:>14}  {:>8}\n",
            "Road subset", "R²", "Naive MSE", "Predicted MSE", "n"
        );
        let _ = writeln!(out, "{}", "-".repeat(width + 52));
        for r in &self.rows {
            let r2 = r.r_squared.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>12.2}  {:>14.2}  {:>8}",
                r.subset.label(),
                r2,
                r.naive_mse,
                r.predicted_mse,
                r.node_count
            );
        }
        for s in &self.omitted {
            let _ = writeln!(out, "{:<width$}  (no roads)", s.label());
        }
        out
    }
}

/// Pools `y` and `y_hat` (already concatenated across scenarios) into one
/// row per non-empty subset.
pub fn subset_report(y: &[f64], y_hat: &[f64], classes: &[RoadClass], treated: &[bool]) -> Result<SubsetReport> {
    check_aligned(y, y_hat)?;
    if classes.len() != y.len() || treated.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} values, {} road classes, {} policy flags",
            y.len(),
            classes.len(),
            treated.len()
        )));
    }
    let mut report = SubsetReport::default();
    for subset in Subset::ALL {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| subset.contains(classes[i], treated[i])).collect();
        if idx.is_empty() {
            report.omitted.push(subset);
            continue;
        }
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let ps: Vec<f64> = idx.iter().map(|&i| y_hat[i]).collect();
        let naive = naive_mse(&ys)?;
        let predicted = predicted_mse(&ys, &ps)?;
        let r2 = if idx.len() >= 2 { r_squared_from_mse(predicted, naive).ok() } else { None };
        report.rows.push(SubsetRow {
            subset,
            r_squared: r2,
            naive_mse: naive,
            predicted_mse: predicted,
            node_count: idx.len(),
        });
    }
    Ok(report)
}

/// Whole-network metrics of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub id: String,
    pub predicted_mse: f64,
    pub naive_mse: f64,
    pub r_squared: Option<f64>,
}

pub fn scenario_metrics(id: &str, y: &[f64], y_hat: &[f64]) -> Result<ScenarioMetrics> {
    let predicted = predicted_mse(y, y_hat)?;
    let naive = naive_mse(y)?;
    Ok(ScenarioMetrics {
        id: id.to_string(),
        predicted_mse: predicted,
        naive_mse: naive,
        r_squared: if y.len() >= 2 { r_squared_from_mse(predicted, naive).ok() } else { None },
    })
}

pub fn scenario_metrics_csv(metrics: &[ScenarioMetrics]) -> String {
    let mut out = String::from("scenario_id,r2,naive_mse,predicted_mse\n");
    for m in metrics {
        let r2 = m.r_squared.map(|v| format!("{v:.17e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{r2},{:.17e},{:.17e}", m.id, m.naive_mse, m.predicted_mse);
    }
    out
}
