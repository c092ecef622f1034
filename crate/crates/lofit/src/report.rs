// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run reports: per-seed metric rows, their means, and content hashes of
//! every input and output artifact.

use std::collections::BTreeMap;
use std::path::Path;

use lofit_core::tasks::EvalReport;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// One evaluated cell: a condition on one task with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// e.g. `zero_shot`, `intervention`, `lofit`, `random`, `transfer`, `same_task`.
    pub condition: String,
    pub task: String,
    /// Task the heads were selected on, for transfer cells.
    pub source: Option<String>,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub k_percent: Option<f64>,
    pub em: Option<f64>,
    pub mc1: Option<f64>,
    pub mc2: Option<f64>,
    pub n: usize,
}

impl MetricRow {
    pub fn new(condition: &str, task: &str, seed: u64, r: &EvalReport) -> Self {
        Self {
            condition: condition.into(),
            task: task.into(),
            source: None,
            seed,
            k: None,
            k_percent: None,
            em: r.em,
            mc1: r.mc1,
            mc2: r.mc2,
            n: r.n,
        }
    }

    fn key(&self) -> (String, String, Option<String>, Option<usize>) {
        (self.condition.clone(), self.task.clone(), self.source.clone(), self.k)
    }
}

/// Arithmetic mean over the seeds of one `(condition, task, source, K)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub condition: String,
    pub task: String,
    pub source: Option<String>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub k_percent: Option<f64>,
    pub seeds: Vec<u64>,
    pub em: Option<f64>,
    pub mc1: Option<f64>,
    pub mc2: Option<f64>,
}

fn mean(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups rows by cell in order of first appearance.
pub fn aggregate(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<_, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let key = r.key();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let col = |f: fn(&MetricRow) -> Option<f64>| mean(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                condition: key.0,
                task: key.1,
                source: key.2,
                k: key.3,
                k_percent: g[0].k_percent,
                seeds: g.iter().map(|r| r.seed).collect(),
                em: col(|r| r.em),
                mc1: col(|r| r.mc1),
                mc2: col(|r| r.mc2),
            }
        })
        .collect()
}

/// Heads used by one labelled cell, e.g. `seed 1` or `relations seed 1 K 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsUsed {
    pub label: String,
    pub heads: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// Fully resolved configuration.
    pub config: ExperimentConfig,
    pub heads: Vec<HeadsUsed>,
    pub metrics: Vec<MetricRow>,
    pub aggregate: Vec<AggregateRow>,
    /// SHA-256 of inputs and of outputs written before the report.
    pub artifacts: BTreeMap<String, String>,
}

impl RunReport {
    pub fn new(command: &str, config: ExperimentConfig, heads: Vec<HeadsUsed>, metrics: Vec<MetricRow>) -> Self {
        let aggregate = aggregate(&metrics);
        Self { command: command.into(), config, heads, metrics, aggregate, artifacts: BTreeMap::new() }
    }

    pub fn find(&self, condition: &str, task: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.condition == condition && a.task == task)
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    condition: &'a str,
    task: &'a str,
    source: &'a str,
    seed: u64,
    #[serde(rename = "K")]
    k: Option<usize>,
    k_percent: Option<f64>,
    em: Option<f64>,
    mc1: Option<f64>,
    mc2: Option<f64>,
    n: usize,
}

/// Plot-ready CSV, one line per metric row.
pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow {
            condition: &r.condition,
            task: &r.task,
            source: r.source.as_deref().unwrap_or(""),
            seed: r.seed,
            k: r.k,
            k_percent: r.k_percent,
            em: r.em,
            mc1: r.mc1,
            mc2: r.mc2,
            n: r.n,
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    crate::formats::write_bytes(path, &bytes)
}

/// Wall-clock time, kept out of the hashed report so reruns stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub wall_clock_s: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cond: &str, seed: u64, em: f64) -> MetricRow {
        MetricRow {
            condition: cond.into(),
            task: "relations".into(),
            source: None,
            seed,
            k: Some(3),
            k_percent: None,
            em: Some(em),
            mc1: None,
            mc2: None,
            n: 4,
        }
    }

    #[test]
    fn aggregate_is_mean_per_cell_in_first_seen_order() {
        let rows = vec![row("lofit", 0, 0.5), row("random", 0, 0.1), row("lofit", 1, 0.25), row("random", 1, 0.3)];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].condition, "lofit");
        assert_eq!(agg[0].em, Some(0.375));
        assert_eq!(agg[0].seeds, vec![0, 1]);
        assert!((agg[1].em.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(agg[0].mc1, None);
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&p, &[row("lofit", 0, 0.5), row("lofit", 1, 0.25)]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "condition,task,source,seed,K,k_percent,em,mc1,mc2,n");
        assert_eq!(lines[1], "lofit,relations,,0,3,,0.5,,,4");
    }
}
