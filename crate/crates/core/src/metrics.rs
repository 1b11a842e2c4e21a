//! Normalized task score and the parameter / FLOP cost model.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::{FlopCount, RouteTrace};

/// One dataset's score for the model under evaluation and the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub task: String,
    pub size: u64,
    pub score: f64,
    pub reference: f64,
}

/// Size-weighted mean of `score / reference` over a task's datasets, as a
/// percentage of the reference.
pub fn normalized_task_score(scores: &[DatasetScore]) -> Result<f64> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Domain("a task needs at least one dataset".into()))?;
    let mut total = 0u64;
    for s in scores {
        if s.task != first.task {
            return Err(Error::Usage(format!(
                "dataset `{}` belongs to task `{}`, not `{}`",
                s.dataset, s.task, first.task
            )));
        }
        if s.size == 0 {
            return Err(Error::Domain(format!("dataset `{}` has size 0", s.dataset)));
        }
        if !(s.reference > 0.0) {
            return Err(Error::Domain(format!(
                "dataset `{}` has non-positive reference score {}",
                s.dataset, s.reference
            )));
        }
        if !s.score.is_finite() {
            return Err(Error::NumericInput(format!("score of dataset `{}`", s.dataset)));
        }
        total += s.size;
    }
    let total = total as f64;
    let weighted: f64 = scores
        .iter()
        .map(|s| (s.size as f64 / total) * (s.score / s.reference))
        .sum();
    Ok(100.0 * weighted)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: String,
    pub samples: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreTable {
    /// In order of first appearance.
    pub tasks: Vec<TaskScore>,
    /// Unweighted mean over tasks.
    pub average: f64,
    /// Mean over tasks weighted by sample count.
    pub weighted_average: f64,
}

/// Groups rows by task and scores each group.
pub fn score_table(rows: &[DatasetScore]) -> Result<ScoreTable> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.task.as_str()) {
            order.push(&r.task);
        }
    }
    if order.is_empty() {
        return Err(Error::Domain("no dataset scores".into()));
    }
    let mut tasks = Vec::with_capacity(order.len());
    for task in order {
        let group: Vec<DatasetScore> = rows.iter().filter(|r| r.task == task).cloned().collect();
        tasks.push(TaskScore {
            task: task.to_owned(),
            samples: group.iter().map(|r| r.size).sum(),
            score: normalized_task_score(&group)?,
        });
    }
    let average = tasks.iter().map(|t| t.score).sum::<f64>() / tasks.len() as f64;
    let samples: u64 = tasks.iter().map(|t| t.samples).sum();
    let weighted_average = tasks
        .iter()
        .map(|t| t.score * t.samples as f64 / samples as f64)
        .sum();
    Ok(ScoreTable {
        tasks,
        average,
        weighted_average,
    })
}

/// Reads `dataset,task,size,score,reference` rows (header required).
pub fn read_scores_csv<R: Read>(reader: R) -> Result<Vec<DatasetScore>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn read_scores_file(path: &Path) -> Result<Vec<DatasetScore>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores_csv(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodCosts {
    pub arrow: u64,
    pub spectr: u64,
    pub lag: u64,
}

/// Extra parameters and per-token FLOPs for a library of `n` rank-`r`
/// adapters on a square layer of hidden size `h`, with top-`k` filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub n: u64,
    pub h: u64,
    pub r: u64,
    pub k: u64,
    /// Set when the requested k exceeded n and was clamped.
    pub k_clamped: bool,
    pub disk: MethodCosts,
    pub gpu_best: MethodCosts,
    pub flops: MethodCosts,
}

/// Closed-form costs:
///
/// | | arrow | spectral | two-stage |
/// |---|---|---|---|
/// | disk | `2nhr + nh` | `2nhr` | `2nhr` |
/// | device, best case | `2khr + nh` | `2nhr` | `2khr + nh` |
/// | FLOPs | `2nh` | `2nhr` | `2h(n + rk)` |
///
/// At `k = n` no filtering happens and the two-stage FLOPs equal the
/// spectral FLOPs.
pub fn cost_model(n: u64, h: u64, r: u64, k: u64) -> Result<CostReport> {
    if n == 0 || h == 0 || r == 0 || k == 0 {
        return Err(Error::Domain(format!(
            "cost model needs positive n, h, r, k (got {n}, {h}, {r}, {k})"
        )));
    }
    let k_clamped = k > n;
    if k_clamped {
        log::warn!("k = {k} exceeds the library size {n}; clamping to {n}");
    }
    let k = k.min(n);
    let lora = 2 * n * h * r;
    let arrows = n * h;
    let filtered = 2 * k * h * r + arrows;
    let lag_flops = if k < n { 2 * h * (n + r * k) } else { lora };
    Ok(CostReport {
        n,
        h,
        r,
        k,
        k_clamped,
        disk: MethodCosts {
            arrow: lora + arrows,
            spectr: lora,
            lag: lora,
        },
        gpu_best: MethodCosts {
            arrow: filtered,
            spectr: lora,
            lag: filtered,
        },
        flops: MethodCosts {
            arrow: 2 * n * h,
            spectr: lora,
            lag: lag_flops,
        },
    })
}

impl CostReport {
    /// Plain-text table, one row per cost, one column per method.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "n = {}, h = {}, r = {}, k = {}{}\n",
            self.n,
            self.h,
            self.r,
            self.k,
            if self.k_clamped { " (clamped)" } else { "" }
        );
        s.push_str(&format!("{:<14}{:>20}{:>20}{:>20}\n", "", "arrow", "spectr", "lag"));
        for (name, c) in [
            ("disk params", self.disk),
            ("gpu best", self.gpu_best),
            ("flops/token", self.flops),
        ] {
            s.push_str(&format!("{:<14}{:>20}{:>20}{:>20}\n", name, c.arrow, c.spectr, c.lag));
        }
        s
    }
}

/// Counted vs. closed-form routing FLOPs per decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopCheck {
    pub decisions: usize,
    pub arrow_per_decision: f64,
    pub spectral_per_decision: f64,
    pub apply_per_decision: f64,
    pub counted_per_decision: f64,
    pub predicted: u64,
    pub relative_deviation: f64,
}

impl FlopCheck {
    pub fn report(&self) -> String {
        format!(
            "decisions {}: arrow {:.1} + spectral {:.1} + apply {:.1} = {:.1} counted vs {} predicted ({:+.3}%)",
            self.decisions,
            self.arrow_per_decision,
            self.spectral_per_decision,
            self.apply_per_decision,
            self.counted_per_decision,
            self.predicted,
            100.0 * self.relative_deviation
        )
    }
}

pub const FLOP_TOLERANCE: f64 = 0.05;

/// Compares the trace's counted FLOPs per decision with the two-stage
/// closed form for `(n, h, r, k)`. Fails with a per-stage report when the
/// relative deviation exceeds 5%.
pub fn measured_flops_check(trace: &RouteTrace, n: u64, h: u64, r: u64, k: u64) -> Result<FlopCheck> {
    let decisions = trace.entries.len();
    if decisions == 0 {
        return Err(Error::Domain("trace has no routing decisions".into()));
    }
    let predicted = cost_model(n, h, r, k)?.flops.lag;
    let FlopCount { arrow, spectral, apply } = trace.total_flops();
    let per = |v: u64| v as f64 / decisions as f64;
    let counted = per(arrow + spectral + apply);
    let check = FlopCheck {
        decisions,
        arrow_per_decision: per(arrow),
        spectral_per_decision: per(spectral),
        apply_per_decision: per(apply),
        counted_per_decision: counted,
        predicted,
        relative_deviation: (counted - predicted as f64) / predicted as f64,
    };
    if check.relative_deviation.abs() > FLOP_TOLERANCE {
        return Err(Error::FlopDiscrepancy(check.report()));
    }
    Ok(check)
}
