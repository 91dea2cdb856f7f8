//! Per-order and cross-order metric tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{avg_accuracy, backward_transfer, forward_transfer, mean_std, AccuracyMatrix};

/// Everything `render_report` needs from one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub task_names: Vec<String>,
    /// `1 / K_t` per task id.
    pub chance: Vec<f64>,
    pub matrix: AccuracyMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderMetrics {
    pub order: Vec<usize>,
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub orders: Vec<OrderMetrics>,
    pub acc: MeanStd,
    pub bwt: MeanStd,
    pub fwt: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task_names: Vec<String>,
    pub methods: Vec<MetricReport>,
}

pub fn order_label(order: &[usize]) -> String {
    order.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

impl OrderMetrics {
    pub fn from_run(run: &RunSummary) -> Result<Self> {
        Ok(Self {
            order: run.matrix.order.clone(),
            acc: avg_accuracy(&run.matrix)?,
            bwt: backward_transfer(&run.matrix)?,
            fwt: forward_transfer(&run.matrix, &run.chance)?,
        })
    }
}

fn summarize(values: impl Iterator<Item = f64>) -> MeanStd {
    let v: Vec<f64> = values.collect();
    let (mean, std) = mean_std(&v);
    MeanStd { mean, std }
}

/// Groups runs by method (sorted by name), orders within a method sorted
/// lexicographically, and adds a mean +- population-std row per method.
pub fn build_report(runs: &[RunSummary]) -> Result<Report> {
    let first = runs.first().ok_or_else(|| Error::Contract("no runs to report".into()))?;
    for r in runs {
        if r.task_names != first.task_names || r.chance.len() != first.chance.len() {
            return Err(Error::Contract(format!(
                "runs cover different task sets: {:?} vs {:?}",
                first.task_names, r.task_names
            )));
        }
    }
    let mut methods: Vec<&str> = runs.iter().map(|r| r.method.as_str()).collect();
    methods.sort();
    methods.dedup();

    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let mut orders = runs
            .iter()
            .filter(|r| r.method == method)
            .map(OrderMetrics::from_run)
            .collect::<Result<Vec<_>>>()?;
        orders.sort_by(|a, b| a.order.cmp(&b.order));
        out.push(MetricReport {
            method: method.to_string(),
            acc: summarize(orders.iter().map(|o| o.acc)),
            bwt: summarize(orders.iter().map(|o| o.bwt)),
            fwt: summarize(orders.iter().map(|o| o.fwt)),
            orders,
        });
    }
    Ok(Report {
        task_names: first.task_names.clone(),
        methods: out,
    })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tasks: {}", self.task_names.join(", "));
        let _ = writeln!(s, "{:<16} {:<10} {:>17} {:>17} {:>17}", "method", "order", "Acc", "BwT", "FwT");
        for m in &self.methods {
            for o in &m.orders {
                let _ = writeln!(
                    s,
                    "{:<16} {:<10} {:>17.4} {:>17.4} {:>17.4}",
                    m.method,
                    order_label(&o.order),
                    o.acc,
                    o.bwt,
                    o.fwt
                );
            }
            let pm = |x: MeanStd| format!("{:.4} ± {:.4}", x.mean, x.std);
            let _ = writeln!(
                s,
                "{:<16} {:<10} {:>17} {:>17} {:>17}",
                m.method,
                "Avg",
                pm(m.acc),
                pm(m.bwt),
                pm(m.fwt)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Plain-text and machine-readable renderings of the same report.
pub fn render_report(runs: &[RunSummary]) -> Result<(String, String)> {
    let r = build_report(runs)?;
    Ok((r.to_text(), r.to_json()))
}
