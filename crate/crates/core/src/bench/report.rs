//! Cross-dataset means, vocabulary overlap and table rendering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::error::{Error, Result};

/// Unweighted arithmetic mean.
pub fn aggregate_means(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("no values to average".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cannot average {v}")));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Two-decimal rendering used by every table.
pub fn render2(v: f64) -> String {
    format!("{v:.2}")
}

fn normalize(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Number of class names shared by two vocabularies, after trimming and
/// lowercasing.
pub fn vocab_overlap<S: AsRef<str>, T: AsRef<str>>(train: &[S], test: &[T]) -> usize {
    let a: BTreeSet<String> = train.iter().map(|s| normalize(s.as_ref())).collect();
    let b: BTreeSet<String> = test.iter().map(|s| normalize(s.as_ref())).collect();
    a.intersection(&b).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub per_dataset: BTreeMap<String, MetricsReport>,
    /// Dataset names in evaluation order.
    pub order: Vec<String>,
    pub m_miou: f64,
    pub m_macc: f64,
}

impl BenchmarkReport {
    /// Means over datasets; every dataset must have defined metrics.
    pub fn new(results: Vec<(String, MetricsReport)>) -> Result<Self> {
        let mut mious = Vec::new();
        let mut maccs = Vec::new();
        for (name, r) in &results {
            let (Some(m), Some(a)) = (r.miou, r.macc) else {
                return Err(Error::Empty(format!("dataset {name} has no evaluated pixels")));
            };
            mious.push(m);
            maccs.push(a);
        }
        let m_miou = aggregate_means(&mious)?;
        let m_macc = aggregate_means(&maccs)?;
        let order = results.iter().map(|(n, _)| n.clone()).collect();
        let mut per_dataset = BTreeMap::new();
        for (name, r) in results {
            if per_dataset.insert(name.clone(), r).is_some() {
                return Err(Error::Config(format!("dataset {name} evaluated twice")));
            }
        }
        Ok(BenchmarkReport {
            per_dataset,
            order,
            m_miou,
            m_macc,
        })
    }

    /// One header row of dataset names followed by mIoU and mACC rows, all
    /// values scaled by 100, means last.
    pub fn markdown(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| render2(100.0 * x));
        let mut out = String::from("| metric |");
        for n in &self.order {
            out.push_str(&format!(" {n} |"));
        }
        out.push_str(" mean |\n|---|");
        out.push_str(&"---|".repeat(self.order.len() + 1));
        out.push('\n');
        for (label, pick, mean) in [
            ("mIoU", (|r: &MetricsReport| r.miou) as fn(&MetricsReport) -> Option<f64>, self.m_miou),
            ("mACC", |r: &MetricsReport| r.macc, self.m_macc),
        ] {
            out.push_str(&format!("| {label} |"));
            for n in &self.order {
                out.push_str(&format!(" {} |", pct(pick(&self.per_dataset[n]))));
            }
            out.push_str(&format!(" {} |\n", render2(100.0 * mean)));
        }
        out
    }
}

/// `| train | test | overlap |` rows.
pub fn overlap_table(train_name: &str, train: &[String], tests: &[(String, Vec<String>)]) -> String {
    let mut out = String::from("| train | test | overlap |\n|---|---|---|\n");
    for (name, classes) in tests {
        out.push_str(&format!("| {train_name} | {name} | {} |\n", vocab_overlap(train, classes)));
    }
    out
}
