//! Label-distribution skew measured as the mean pairwise Earth Mover's
//! Distance between device label histograms.
//!
//! Labels are treated as points on a line with ground distance `|i - j|`, so
//! the EMD between two histograms is the L1 distance between their CDFs.
//! Under this metric a random pair of single-label devices over `K` classes
//! sits at `E|i - j| = (K^2 - 1) / (3K)` on average: 3.3 for ten classes and
//! about 2.29 for seven.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::partition::{build_partition, ClientShard, PartitionManifest, PartitionParams};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::invalid("label probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("label probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::invalid("empty histogram"));
        }
        Ok(Self(counts.iter().map(|&c| c as f64 / total as f64).collect()))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IidLevel {
    Low,
    Moderate,
    High,
}

impl fmt::Display for IidLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IidLevel::Low => "Low",
            IidLevel::Moderate => "Moderate",
            IidLevel::High => "High",
        })
    }
}

/// Normalized label counts over a device's train samples.
pub fn label_histogram(shard: &ClientShard, labels: &[usize], num_classes: usize) -> Result<LabelDistribution> {
    if shard.train.is_empty() {
        return Err(Error::EmptyShard {
            device: shard.device_id,
            split: "train",
        });
    }
    let mut counts = vec![0usize; num_classes];
    for &i in &shard.train {
        let l = labels[i];
        if l >= num_classes {
            return Err(Error::invalid(format!("label {l} outside [0, {num_classes})")));
        }
        counts[l] += 1;
    }
    LabelDistribution::from_counts(&counts)
}

/// 1-Wasserstein distance on the label line: `sum_i |CDF_p(i) - CDF_q(i)|`.
pub fn pairwise_emd(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    if p.num_classes() != q.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: p.num_classes(),
            got: q.num_classes(),
        });
    }
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    let k = p.num_classes();
    for (a, b) in p.0.iter().zip(&q.0).take(k.saturating_sub(1)) {
        cdf_gap += a - b;
        total += cdf_gap.abs();
    }
    Ok(total)
}

/// Mean pairwise EMD over all unordered pairs of histograms.
pub fn mean_pairwise_emd(dists: &[LabelDistribution]) -> Result<f64> {
    if dists.len() < 2 {
        return Err(Error::invalid("system EMD needs at least two devices"));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, p) in dists.iter().enumerate() {
        for q in &dists[i + 1..] {
            sum += pairwise_emd(p, q)?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

pub fn system_emd(shards: &[ClientShard], labels: &[usize], num_classes: usize) -> Result<f64> {
    let dists = shards
        .iter()
        .map(|s| label_histogram(s, labels, num_classes))
        .collect::<Result<Vec<_>>>()?;
    mean_pairwise_emd(&dists)
}

/// Buckets a system EMD into an IID level. Range boundaries belong to
/// `Moderate`.
pub fn classify_iid(emd: f64, num_classes: usize) -> Result<IidLevel> {
    let (high_below, low_above) = match num_classes {
        10 => (1.2, 2.2),
        7 => (1.0, 1.7),
        other => return Err(Error::UnsupportedClassCount(other)),
    };
    Ok(if emd > low_above {
        IidLevel::Low
    } else if emd < high_below {
        IidLevel::High
    } else {
        IidLevel::Moderate
    })
}

/// Fills `manifest.emd` and, when thresholds exist for the class count,
/// `manifest.iid_level`.
pub fn annotate(manifest: &mut PartitionManifest, labels: &[usize]) -> Result<f64> {
    let emd = system_emd(&manifest.shards, labels, manifest.allocation.num_classes)?;
    manifest.emd = Some(emd);
    manifest.iid_level = classify_iid(emd, manifest.allocation.num_classes).ok();
    Ok(emd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub k: usize,
    pub var: f64,
    pub trial: usize,
    pub emd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub var: f64,
    pub mean_emd: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmdSweep {
    /// Ordered by `(k, var, trial)` in input order.
    pub trials: Vec<SweepTrial>,
    /// Ordered by `(k, var)` in input order.
    pub cells: Vec<SweepCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub ks: Vec<usize>,
    pub vars: Vec<f64>,
    pub num_devices: usize,
    pub max_samples: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Seed used for trial `t` of every sweep cell. Sharing seeds across cells
/// gives common random numbers, which keeps trends along `k` and `var` clean.
pub fn sweep_trial_seed(seed: u64, trial: usize) -> u64 {
    rng::derive_seed(seed, &[tag::SWEEP, trial as u64])
}

pub fn emd_sweep(dataset: &Dataset, grid: &SweepGrid) -> Result<EmdSweep> {
    if grid.ks.is_empty() || grid.vars.is_empty() || grid.trials == 0 {
        return Err(Error::invalid("sweep needs at least one k, one var and one trial"));
    }
    let jobs: Vec<(usize, f64, usize)> = grid
        .ks
        .iter()
        .flat_map(|&k| {
            grid.vars
                .iter()
                .flat_map(move |&var| (0..grid.trials).map(move |t| (k, var, t)))
        })
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(k, var, trial)| {
            let params = PartitionParams {
                k,
                num_devices: grid.num_devices,
                max_samples: grid.max_samples,
                var,
                seed: sweep_trial_seed(grid.seed, trial),
            };
            let manifest = build_partition(dataset, &params)?;
            let emd = system_emd(&manifest.shards, &dataset.labels, dataset.num_classes)?;
            Ok(SweepTrial { k, var, trial, emd })
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = trials
        .chunks(grid.trials)
        .map(|chunk| SweepCell {
            k: chunk[0].k,
            var: chunk[0].var,
            mean_emd: chunk.iter().map(|t| t.emd).sum::<f64>() / chunk.len() as f64,
        })
        .collect();
    Ok(EmdSweep { trials, cells })
}

impl EmdSweep {
    pub fn cell(&self, k: usize, var: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.k == k && c.var == var)
    }

    /// Writes `k,var,trial,emd` rows.
    pub fn write_trials_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("k,var,trial,emd\n");
        for t in &self.trials {
            out.push_str(&format!("{},{},{},{}\n", t.k, t.var, t.trial, t.emd));
        }
        write_all(path.as_ref(), &out)
    }

    /// Writes `k,var,mean_emd` rows.
    pub fn write_cells_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("k,var,mean_emd\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{}\n", c.k, c.var, c.mean_emd));
        }
        write_all(path.as_ref(), &out)
    }
}

fn write_all(path: &Path, text: &str) -> Result<()> {
    fs::File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}
