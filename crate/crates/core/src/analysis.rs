//! Learning-curve post-processing and cross-experiment tables.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::ExperimentResult;

#[derive(Clone, Debug, PartialEq)]
pub struct Curve(Vec<f64>);

impl Curve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty curve"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("curve"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierRemoval {
    pub curve: Curve,
    /// Indices that were backfilled.
    pub removed: Vec<usize>,
    /// Every point was flagged; the input is returned unchanged.
    pub degenerate: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Replaces points further than `sigma_mult` population standard deviations
/// from the mean with the previous retained value (the next one for a leading
/// run). Repeats until no point is flagged, so the output is a fixed point.
pub fn remove_outliers(curve: &Curve, sigma_mult: f64) -> Result<OutlierRemoval> {
    if curve.len() < 3 {
        return Err(Error::invalid("outlier removal needs at least 3 points"));
    }
    if sigma_mult.is_nan() || sigma_mult < 0.0 {
        return Err(Error::invalid(format!(
            "sigma multiplier {sigma_mult} must be non-negative"
        )));
    }
    let mut values = curve.0.clone();
    let mut removed = Vec::new();
    for _ in 0..values.len() {
        let (mean, std) = mean_std(&values);
        let flagged: Vec<bool> = values.iter().map(|v| (v - mean).abs() > sigma_mult * std).collect();
        if !flagged.contains(&true) {
            break;
        }
        if !flagged.contains(&false) {
            return Ok(OutlierRemoval {
                curve: curve.clone(),
                removed: Vec::new(),
                degenerate: true,
            });
        }
        let first_kept = flagged.iter().position(|f| !f).expect("some point kept");
        let mut last_kept = values[first_kept];
        for i in 0..values.len() {
            if flagged[i] {
                values[i] = if i < first_kept { values[first_kept] } else { last_kept };
                removed.push(i);
            } else {
                last_kept = values[i];
            }
        }
    }
    removed.sort_unstable();
    removed.dedup();
    Ok(OutlierRemoval {
        curve: Curve(values),
        removed,
        degenerate: false,
    })
}

/// Trailing mean over `window` points; the first `window - 1` points average
/// the available prefix. Means are taken relative to the window's first value
/// so a constant stretch stays bit-exact.
pub fn moving_average(curve: &Curve, window: usize) -> Result<Curve> {
    if window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    let v = &curve.0;
    let out = (0..v.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            let slice = &v[start..=i];
            let base = slice[0];
            base + slice.iter().map(|x| x - base).sum::<f64>() / slice.len() as f64
        })
        .collect();
    Ok(Curve(out))
}

/// Maximum value and its earliest 1-based round.
pub fn best_f1(curve: &Curve) -> (usize, f64) {
    let mut best = (1, curve.0[0]);
    for (i, &v) in curve.0.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    best
}

/// Outlier removal followed by smoothing.
pub fn process_curve(curve: &Curve, sigma_mult: f64, window: usize) -> Result<Curve> {
    let cleaned = if curve.len() >= 3 {
        remove_outliers(curve, sigma_mult)?.curve
    } else {
        curve.clone()
    };
    moving_average(&cleaned, window)
}

/// Experiment parameter a comparison table is grouped by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    ActiveCount,
    Epochs,
    BatchSize,
    Var,
    K,
    MaxSamples,
    Lr,
}

impl Param {
    pub fn name(self) -> &'static str {
        match self {
            Param::ActiveCount => "active_count",
            Param::Epochs => "epochs",
            Param::BatchSize => "batch_size",
            Param::Var => "var",
            Param::K => "k",
            Param::MaxSamples => "max_samples",
            Param::Lr => "lr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Param::ActiveCount,
            Param::Epochs,
            Param::BatchSize,
            Param::Var,
            Param::K,
            Param::MaxSamples,
            Param::Lr,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown parameter `{s}`")))
    }

    pub fn value(self, r: &ExperimentResult) -> f64 {
        let c = &r.config;
        match self {
            Param::ActiveCount => c.active_count as f64,
            Param::Epochs => c.local.epochs as f64,
            Param::BatchSize => c.local.batch_size as f64,
            Param::Var => c.var,
            Param::K => c.k as f64,
            Param::MaxSamples => c.max_samples as f64,
            Param::Lr => c.local.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub iid_level: String,
    pub param: String,
    pub param_value: f64,
    pub aggregator: String,
    pub best_f1: f64,
    pub best_round: usize,
    pub is_best: bool,
}

pub const TABLE_HEADER: &str = "dataset,iid_level,param,param_value,aggregator,best_f1,best_round,is_best";

/// One row per result, scored by `score` (best round, best value). Rows are
/// sorted by dataset, IID level, parameter value and aggregator; within each
/// (dataset, IID level, parameter value) group every row reaching the maximum
/// is flagged.
pub fn compare_table_by(
    results: &[ExperimentResult],
    group_by: Param,
    score: impl Fn(&ExperimentResult) -> (usize, f64),
) -> Result<Vec<TableRow>> {
    if results.is_empty() {
        return Err(Error::invalid("nothing to compare"));
    }
    let mut keyed: Vec<(&ExperimentResult, TableRow)> = results
        .iter()
        .map(|r| {
            let (best_round, best_f1) = score(r);
            let row = TableRow {
                dataset: r.config.dataset.clone(),
                iid_level: r.iid_level.map_or_else(|| "NA".to_string(), |l| l.to_string()),
                param: group_by.name().to_string(),
                param_value: group_by.value(r),
                aggregator: r.config.aggregator.to_string(),
                best_f1,
                best_round,
                is_best: false,
            };
            (r, row)
        })
        .collect();
    keyed.sort_by(|(ra, a), (rb, b)| {
        a.dataset
            .cmp(&b.dataset)
            .then_with(|| rb.iid_level.cmp(&ra.iid_level))
            .then_with(|| a.param_value.partial_cmp(&b.param_value).unwrap_or(Ordering::Equal))
            .then_with(|| ra.config.aggregator.cmp(&rb.config.aggregator))
            .then_with(|| ra.config.seed.cmp(&rb.config.seed))
    });
    let mut rows: Vec<TableRow> = keyed.into_iter().map(|(_, row)| row).collect();
    let same_group = |a: &TableRow, b: &TableRow| {
        a.dataset == b.dataset && a.iid_level == b.iid_level && a.param_value == b.param_value
    };
    let mut start = 0;
    while start < rows.len() {
        let mut end = start + 1;
        while end < rows.len() && same_group(&rows[start], &rows[end]) {
            end += 1;
        }
        let max = rows[start..end]
            .iter()
            .map(|r| r.best_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        for r in &mut rows[start..end] {
            r.is_best = r.best_f1 == max;
        }
        start = end;
    }
    Ok(rows)
}

pub fn compare_table(results: &[ExperimentResult], group_by: Param) -> Result<Vec<TableRow>> {
    compare_table_by(results, group_by, |r| (r.best_round, r.best_f1))
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.dataset, r.iid_level, r.param, r.param_value, r.aggregator, r.best_f1, r.best_round, r.is_best
        );
    }
    out
}

pub fn write_table_csv(rows: &[TableRow], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, table_csv(rows))?;
    Ok(())
}

/// Population standard deviation of consecutive differences; a measure of
/// round-to-round volatility.
pub fn round_to_round_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let diffs: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    mean_std(&diffs).1
}
