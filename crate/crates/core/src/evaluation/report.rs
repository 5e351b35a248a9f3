//! Metric rows, aggregation and CSV output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub task: String,
    pub pct: f64,
    pub fold: usize,
    pub seed: u64,
    /// `{variant}.{metric}`, e.g. `pretrained.weighted_f1`.
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub dataset: String,
    pub task: String,
    pub pct: f64,
    pub metric: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

type Key = (String, String, u64, String);

fn pct_key(pct: f64) -> u64 {
    pct.to_bits()
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Mean over folds and seeds per `(dataset, task, pct, metric)`, sorted
    /// by key so the result does not depend on row order.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut acc: BTreeMap<Key, (f64, Vec<f64>)> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.dataset.clone(), r.task.clone(), pct_key(r.pct), r.metric.clone());
            acc.entry(key).or_insert_with(|| (r.pct, Vec::new())).1.push(r.value);
        }
        let mut out: Vec<AggregateRow> = acc
            .into_iter()
            .map(|((dataset, task, _, metric), (pct, mut values))| {
                // Summing in sorted order keeps the mean independent of row order.
                values.sort_by(f64::total_cmp);
                AggregateRow { dataset, task, pct, metric, mean: values.iter().sum::<f64>() / values.len() as f64, count: values.len() }
            })
            .collect();
        out.sort_by(|a, b| {
            (&a.dataset, &a.task).cmp(&(&b.dataset, &b.task)).then(a.pct.total_cmp(&b.pct)).then(a.metric.cmp(&b.metric))
        });
        out
    }

    /// Mean of one aggregate cell, if present.
    pub fn mean(&self, task: &str, pct: f64, metric: &str) -> Option<f64> {
        self.aggregate().into_iter().find(|a| a.task == task && a.pct == pct && a.metric == metric).map(|a| a.mean)
    }

    /// `dataset,task,pct,fold,seed,metric,value` with per-run rows first and
    /// then one aggregate row per cell, whose fold and seed read `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,task,pct,fold,seed,metric,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{},{}", r.dataset, r.task, r.pct, r.fold, r.seed, r.metric, r.value)
                .expect("string write");
        }
        for a in self.aggregate() {
            writeln!(out, "{},{},{},mean,mean,{},{}", a.dataset, a.task, a.pct, a.metric, a.mean).expect("string write");
        }
        out
    }

    /// Aligned text table of the aggregate means.
    pub fn summary_table(&self) -> String {
        let agg = self.aggregate();
        let width = agg.iter().map(|a| a.metric.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<10} {:<8} {:>5}  {:<width$}  {:>8}\n", "dataset", "task", "pct", "metric", "mean");
        for a in agg {
            writeln!(out, "{:<10} {:<8} {:>5}  {:<width$}  {:>8.4}", a.dataset, a.task, a.pct, a.metric, a.mean)
                .expect("string write");
        }
        out
    }
}
