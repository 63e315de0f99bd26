//! Closed-form attention traffic, expert-load overlap and latency breakdowns.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{RunReport, StageKind};
use crate::moe::MetaQueue;

/// Data load, latency, bandwidth and memory of one attention product, in
/// token blocks and iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyticStats {
    pub data_load: Ratio<u64>,
    pub latency: Ratio<u64>,
    pub bandwidth: Ratio<u64>,
    pub memory: Ratio<u64>,
}

fn ratio_json(r: Ratio<u64>) -> Value {
    if r.is_integer() {
        json!(r.to_integer())
    } else {
        json!({ "exact": r.to_string(), "approx": *r.numer() as f64 / *r.denom() as f64 })
    }
}

impl AnalyticStats {
    pub fn to_json(&self) -> Value {
        json!({
            "data_load": ratio_json(self.data_load),
            "latency": ratio_json(self.latency),
            "bandwidth": ratio_json(self.bandwidth),
            "memory": ratio_json(self.memory),
        })
    }
}

pub fn analytic_attention_stats(n: u64, p: u64, reordered: bool) -> Result<AnalyticStats> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument(format!("need n ≥ 1 and p ≥ 1, got n = {n}, p = {p}")));
    }
    let n = Ratio::from_integer(n);
    let p = Ratio::from_integer(p);
    let one = Ratio::from_integer(1);
    let per_lane = n * n / p;
    Ok(if reordered {
        AnalyticStats { data_load: per_lane + n + p - one, latency: per_lane + p - one, bandwidth: one, memory: p + one }
    } else {
        AnalyticStats { data_load: n * n + n, latency: per_lane, bandwidth: p, memory: p + one }
    })
}

/// Load latency left exposed when each expert's weights are fetched while
/// the previous expert computes: the first load is always exposed, later
/// ones only by the amount the previous queue's compute fails to cover.
pub fn moe_load_overlap(mq: &MetaQueue, load_cost: u64, compute_cost: u64) -> u64 {
    let mut lens = mq.order.iter().map(|&e| mq.queues[e].len() as u64);
    let Some(mut prev) = lens.next() else {
        return 0;
    };
    let mut exposed = load_cost;
    for len in lens {
        exposed += load_cost.saturating_sub(compute_cost * prev);
        prev = len;
    }
    exposed
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageShare {
    pub stage: &'static str,
    pub iterations: u64,
    pub share: f64,
}

/// Share of the latency proxy spent in each stage kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageBreakdown {
    pub total_iterations: u64,
    pub stages: Vec<StageShare>,
}

pub fn breakdown(report: &RunReport) -> Result<StageBreakdown> {
    if report.stages.is_empty() {
        return Err(Error::Empty("run report has no stages"));
    }
    let total: u64 = report.stages.iter().map(|s| s.iterations).sum();
    if total == 0 {
        return Err(Error::Empty("run report has no iterations"));
    }
    let stages = StageKind::ALL
        .iter()
        .map(|&k| {
            let iterations = report.stages_of(k).map(|s| s.iterations).sum::<u64>();
            StageShare { stage: k.name(), iterations, share: iterations as f64 / total as f64 }
        })
        .collect();
    Ok(StageBreakdown { total_iterations: total, stages })
}

impl StageBreakdown {
    pub fn share_of(&self, stage: StageKind) -> f64 {
        self.stages.iter().find(|s| s.stage == stage.name()).map_or(0.0, |s| s.share)
    }

    /// Aligned text bars, `width` characters for a 100% share.
    pub fn to_text(&self, width: usize) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let bar = "#".repeat((s.share * width as f64).round() as usize);
            let _ = writeln!(out, "{:<16} {:>6.2}% {:>12}  {bar}", s.stage, 100.0 * s.share, s.iterations);
        }
        let _ = writeln!(out, "{:<16} {:>7} {:>12}", "total", "", self.total_iterations);
        out
    }
}
