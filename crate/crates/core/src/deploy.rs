//! Deployment: evaluate the configuration grid, then reduce it to a
//! budget → best-configuration staircase that answers lookups in
//! logarithmic time.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::calibrate::BnStatsBank;
use crate::cost::model_cost;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::slim::{resize_input, BnMode, SlimNetwork};
use crate::space::{ModelConfig, ModelSpec};
use crate::train::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub config: ModelConfig,
    pub accuracy: f64,
}

/// Validation accuracy of every configuration in a grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    pub split: String,
    pub samples: usize,
}

impl AccuracyTable {
    pub fn get(&self, config: &ModelConfig) -> Option<f64> {
        let key = config.key();
        self.rows.iter().find(|r| r.config.key() == key).map(|r| r.accuracy)
    }
}

/// Top-1 accuracy of one configuration over `val`, with banked statistics.
pub fn evaluate_config(net: &SlimNetwork, bank: &BnStatsBank, val: &[Batch], config: &ModelConfig) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for batch in val.iter().filter(|b| !b.is_empty()) {
        let x = resize_input(&batch.images, config.resolution, config.frames)?;
        let out = net.forward(config, &x, BnMode::Banked(bank))?;
        let c = out.logits.shape()[1];
        for (s, &y) in batch.labels.iter().enumerate() {
            if argmax(&out.logits.data()[s * c..(s + 1) * c]) == y {
                hits += 1;
            }
        }
        total += batch.len();
    }
    if total == 0 {
        return Err(Error::InsufficientData("empty validation stream".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Evaluates every configuration; the bank must cover all of them.
pub fn evaluate_grid(
    net: &SlimNetwork,
    bank: &BnStatsBank,
    val: &[Batch],
    configs: &[ModelConfig],
) -> Result<AccuracyTable> {
    if let Some(missing) = configs.iter().find(|c| !bank.contains(c)) {
        return Err(Error::CalibrationRequired(missing.key()));
    }
    let rows = configs
        .iter()
        .map(|c| {
            Ok(AccuracyRow {
                config: *c,
                accuracy: evaluate_config(net, bank, val, c).map_err(|e| e.at(c.key()))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyTable {
        rows,
        split: "validation".into(),
        samples: val.iter().map(Batch::len).sum(),
    })
}

/// One step of the staircase: at budgets of at least `budget` FLOPs,
/// `config` is the best choice until the next threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub budget: u64,
    pub config: ModelConfig,
    pub accuracy: f64,
}

/// Budget thresholds strictly increasing, accuracies strictly increasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTable {
    entries: Vec<QueryEntry>,
}

impl QueryTable {
    /// Rebuilds a table from stored entries, checking the ordering.
    pub fn from_entries(entries: Vec<QueryEntry>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[1].budget <= w[0].budget || w[1].accuracy < w[0].accuracy {
                return Err(Error::Config(format!(
                    "query table entries out of order at budget {}",
                    w[1].budget
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[QueryEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry with the largest threshold not above `budget` (in FLOPs).
    pub fn lookup(&self, budget: f64) -> Result<&QueryEntry> {
        let idx = self.entries.partition_point(|e| e.budget as f64 <= budget);
        if idx == 0 {
            return Err(Error::BudgetInfeasible {
                budget,
                min: self.entries.first().map_or(0, |e| e.budget),
            });
        }
        Ok(&self.entries[idx - 1])
    }
}

pub fn lookup(table: &QueryTable, budget: f64) -> Result<(ModelConfig, f64)> {
    table.lookup(budget).map(|e| (e.config, e.accuracy))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub cost: u64,
    pub accuracy: f64,
    pub config: ModelConfig,
}

/// Preference among candidates: higher accuracy, then lower cost, lower
/// width, lower resolution, fewer frames. `Less` means `a` is preferred.
pub fn preference(a: &FrontierPoint, b: &FrontierPoint) -> Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then(a.cost.cmp(&b.cost))
        .then(a.config.key().cmp(&b.config.key()))
}

fn costed(acc: &AccuracyTable, model: &ModelSpec) -> Result<Vec<FrontierPoint>> {
    if acc.rows.is_empty() {
        return Err(Error::InsufficientData("empty accuracy table".into()));
    }
    acc.rows
        .iter()
        .map(|r| {
            Ok(FrontierPoint {
                cost: model_cost(model, &r.config)?,
                accuracy: r.accuracy,
                config: r.config,
            })
        })
        .collect()
}

/// Non-dominated configurations sorted by cost. Among exact (cost,
/// accuracy) ties only the preferred configuration is kept.
pub fn pareto_frontier(acc: &AccuracyTable, model: &ModelSpec) -> Result<Vec<FrontierPoint>> {
    let mut pts = costed(acc, model)?;
    pts.sort_by(|a, b| a.cost.cmp(&b.cost).then(preference(a, b)));
    let mut out: Vec<FrontierPoint> = Vec::new();
    for p in pts {
        if out.last().is_none_or(|l| p.accuracy > l.accuracy) {
            out.push(p);
        }
    }
    Ok(out)
}

/// For each distinct cost (ascending) the best configuration affordable at
/// that cost; only strict accuracy improvements become entries.
pub fn build_query_table(acc: &AccuracyTable, model: &ModelSpec) -> Result<QueryTable> {
    let mut pts = costed(acc, model)?;
    pts.sort_by(|a, b| a.cost.cmp(&b.cost).then(preference(a, b)));
    let mut entries: Vec<QueryEntry> = Vec::new();
    let mut best: Option<FrontierPoint> = None;
    let mut i = 0;
    while i < pts.len() {
        let cost = pts[i].cost;
        while i < pts.len() && pts[i].cost == cost {
            if best.is_none_or(|b| preference(&pts[i], &b) == Ordering::Less) {
                best = Some(pts[i]);
            }
            i += 1;
        }
        let b = best.expect("at least one point seen");
        if entries.last().is_none_or(|e| b.accuracy > e.accuracy) {
            entries.push(QueryEntry {
                budget: cost,
                config: b.config,
                accuracy: b.accuracy,
            });
        }
    }
    Ok(QueryTable { entries })
}
