//! Label-skew and quantity-skew partitioning of a training set across
//! simulated devices.
//!
//! The pipeline has three phases, each driven by its own random stream derived
//! from the master seed:
//!
//! 1. [`allocate_labels`]: every device draws `k` distinct labels.
//! 2. [`distribute_samples`]: each label's samples are divided evenly (floor)
//!    among the devices holding it, so no sample lands on two devices. Each
//!    device pool is shuffled and split 80/10/10 into train/val/test, then the
//!    train part is trimmed or topped up to exactly `s` samples; top-ups are
//!    drawn with replacement from every training sample carrying one of the
//!    device's labels.
//! 3. [`apply_quantity_skew`]: each device keeps a uniform random fraction in
//!    `[1 - var, 1]` of its train samples.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, DatasetInfo};
use crate::error::{Error, Result};
use crate::heterogeneity::IidLevel;
use crate::rng::{self, tag, RngStream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAllocation {
    pub k: usize,
    pub num_classes: usize,
    /// Sorted, distinct labels for each device.
    pub devices: Vec<Vec<usize>>,
}

impl LabelAllocation {
    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn holders(&self, label: usize) -> Vec<usize> {
        self.devices
            .iter()
            .enumerate()
            .filter(|(_, labels)| labels.binary_search(&label).is_ok())
            .map(|(d, _)| d)
            .collect()
    }

    pub fn holds(&self, device: usize, label: usize) -> bool {
        self.devices[device].binary_search(&label).is_ok()
    }
}

pub fn allocate_labels(
    k: usize,
    num_classes: usize,
    num_devices: usize,
    rng: &mut impl Rng,
) -> Result<LabelAllocation> {
    if k == 0 || k > num_classes {
        return Err(Error::invalid(format!("k = {k} must lie in [1, {num_classes}]")));
    }
    if num_devices == 0 {
        return Err(Error::invalid("need at least one device"));
    }
    let devices = (0..num_devices)
        .map(|_| {
            let mut labels = index::sample(rng, num_classes, k).into_vec();
            labels.sort_unstable();
            labels
        })
        .collect();
    Ok(LabelAllocation {
        k,
        num_classes,
        devices,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub device_id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Train samples added by sampling with replacement.
    pub resampled_count: usize,
}

fn indices_by_label(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_label = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_label
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} outside [0, {num_classes})")))?
            .push(i);
    }
    Ok(by_label)
}

/// Divides each label's samples among its holders, `floor(count / holders)`
/// each. The returned pools are pairwise disjoint; leftovers stay unassigned.
pub fn assign_pools(labels: &[usize], allocation: &LabelAllocation, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_label = indices_by_label(labels, allocation.num_classes)?;
    let mut pools = vec![Vec::new(); allocation.num_devices()];
    for (label, members) in by_label.iter_mut().enumerate() {
        let holders = allocation.holders(label);
        if holders.is_empty() {
            continue;
        }
        if members.is_empty() {
            return Err(Error::EmptyLabel { label });
        }
        members.shuffle(rng);
        let per_device = members.len() / holders.len();
        for (chunk, &d) in members.chunks_exact(per_device.max(1)).zip(&holders) {
            if per_device > 0 {
                pools[d].extend_from_slice(chunk);
            }
        }
    }
    Ok(pools)
}

/// Shuffles a device pool and splits it 80/10/10: val and test get
/// `floor(n / 10)` each, train the remainder.
pub fn split_pool(device_id: usize, mut pool: Vec<usize>, rng: &mut impl Rng) -> ClientShard {
    pool.shuffle(rng);
    let n = pool.len();
    let n_val = n / 10;
    let n_test = n / 10;
    let test = pool.split_off(n - n_test);
    let val = pool.split_off(n - n_test - n_val);
    ClientShard {
        device_id,
        train: pool,
        val,
        test,
        resampled_count: 0,
    }
}

pub fn distribute_samples(
    labels: &[usize],
    allocation: &LabelAllocation,
    max_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ClientShard>> {
    if max_samples < 1 {
        return Err(Error::invalid("samples per device must be at least 1"));
    }
    let pools = assign_pools(labels, allocation, rng)?;
    let by_label = indices_by_label(labels, allocation.num_classes)?;
    let mut shards = Vec::with_capacity(pools.len());
    for (d, pool) in pools.into_iter().enumerate() {
        let mut shard = split_pool(d, pool, rng);
        let n = shard.train.len();
        if n > max_samples {
            shard.train.shuffle(rng);
            shard.train.truncate(max_samples);
        } else if n < max_samples {
            let candidates: Vec<usize> = allocation.devices[d]
                .iter()
                .flat_map(|&l| by_label[l].iter().copied())
                .collect();
            let extra = max_samples - n;
            shard
                .train
                .extend((0..extra).map(|_| candidates[rng.random_range(0..candidates.len())]));
            shard.resampled_count = extra;
        }
        shards.push(shard);
    }
    Ok(shards)
}

/// Keeps `ceil(f * |train|)` train samples per device (at least one), with
/// `f ~ U[1 - var, 1]`. The kept samples preserve their relative order, so
/// `var = 0` returns the shards unchanged.
pub fn apply_quantity_skew(mut shards: Vec<ClientShard>, var: f64, rng: &mut impl Rng) -> Result<Vec<ClientShard>> {
    if !(0.0..=1.0).contains(&var) {
        return Err(Error::invalid(format!("quantity variance {var} outside [0, 1]")));
    }
    for shard in &mut shards {
        let n = shard.train.len();
        if n == 0 {
            return Err(Error::EmptyShard {
                device: shard.device_id,
                split: "train",
            });
        }
        let keep_fraction: f64 = rng.random_range(1.0 - var..=1.0);
        let keep = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
        if keep < n {
            let mut chosen = index::sample(rng, n, keep).into_vec();
            chosen.sort_unstable();
            shard.train = chosen.into_iter().map(|i| shard.train[i]).collect();
        }
    }
    Ok(shards)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionParams {
    /// Distinct labels per device.
    pub k: usize,
    pub num_devices: usize,
    /// Train samples per device before quantity skew.
    pub max_samples: usize,
    /// Quantity variance in `[0, 1]`.
    pub var: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub tool_version: String,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub dataset: DatasetInfo,
    pub params: PartitionParams,
    pub allocation: LabelAllocation,
    pub shards: Vec<ClientShard>,
    pub emd: Option<f64>,
    pub iid_level: Option<IidLevel>,
}

impl PartitionManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// `[device][label]` train-sample counts.
    pub fn label_counts(&self, labels: &[usize]) -> Vec<Vec<usize>> {
        self.shards
            .iter()
            .map(|s| {
                let mut counts = vec![0; self.allocation.num_classes];
                for &i in &s.train {
                    counts[labels[i]] += 1;
                }
                counts
            })
            .collect()
    }

    pub fn total_train(&self) -> usize {
        self.shards.iter().map(|s| s.train.len()).sum()
    }
}

/// Runs allocation, distribution and quantity skew with per-phase streams, so
/// changing `var` never perturbs the allocation or the base assignment.
/// EMD and IID level are left empty; see [`crate::heterogeneity::annotate`].
pub fn build_partition(dataset: &Dataset, params: &PartitionParams) -> Result<PartitionManifest> {
    let mut alloc_rng: RngStream = rng::stream(params.seed, &[tag::ALLOCATION]);
    let mut dist_rng: RngStream = rng::stream(params.seed, &[tag::DISTRIBUTION]);
    let mut skew_rng: RngStream = rng::stream(params.seed, &[tag::QUANTITY_SKEW]);

    let allocation = allocate_labels(params.k, dataset.num_classes, params.num_devices, &mut alloc_rng)?;
    let shards = distribute_samples(&dataset.labels, &allocation, params.max_samples, &mut dist_rng)?;
    let shards = apply_quantity_skew(shards, params.var, &mut skew_rng)?;
    Ok(PartitionManifest {
        tool_version: crate::VERSION.to_string(),
        config_hash: None,
        dataset: DatasetInfo::from(dataset),
        params: params.clone(),
        allocation,
        shards,
        emd: None,
        iid_level: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn rng(seed: u64) -> RngStream {
        RngStream::seed_from_u64(seed)
    }

    /// 10 classes, `per_class` samples each, laid out class-interleaved.
    fn labels(per_class: usize) -> Vec<usize> {
        (0..per_class * 10).map(|i| i % 10).collect()
    }

    #[test]
    fn full_allocation_when_k_equals_classes() {
        let a = allocate_labels(10, 10, 5, &mut rng(0)).unwrap();
        assert!(a.devices.iter().all(|d| *d == (0..10).collect::<Vec<_>>()));
    }

    #[test]
    fn allocation_has_no_repeats() {
        let a = allocate_labels(2, 10, 30, &mut rng(1)).unwrap();
        for d in &a.devices {
            assert_eq!(d.len(), 2);
            assert_ne!(d[0], d[1]);
        }
        assert!(allocate_labels(11, 10, 30, &mut rng(1)).is_err());
        assert!(allocate_labels(0, 10, 30, &mut rng(1)).is_err());
        assert!(allocate_labels(1, 10, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn single_label_allocation_is_uniform_across_seeds() {
        // Monte-Carlo oracle: each of 10 labels should be held by 30/10 = 3
        // devices on average.
        let mut totals = [0usize; 10];
        for seed in 0..1000 {
            let a = allocate_labels(1, 10, 30, &mut rng(seed)).unwrap();
            for d in &a.devices {
                totals[d[0]] += 1;
            }
        }
        for t in totals {
            let mean = t as f64 / 1000.0;
            assert!((mean - 3.0).abs() <= 0.3, "mean holders {mean}");
        }
    }

    #[test]
    fn single_device_holds_everything() {
        let ls = labels(100);
        let n = ls.len();
        let a = allocate_labels(10, 10, 1, &mut rng(0)).unwrap();
        let s = distribute_samples(&ls, &a, 800, &mut rng(1)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].val.len(), n / 10);
        assert_eq!(s[0].test.len(), n / 10);
        assert_eq!(s[0].train.len(), 800);
        assert_eq!(s[0].resampled_count, 0);
        let mut all: Vec<usize> = s[0].train.iter().chain(&s[0].val).chain(&s[0].test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn pools_are_disjoint_and_label_pure() {
        let ls = labels(200);
        let a = allocate_labels(3, 10, 30, &mut rng(2)).unwrap();
        let pools = assign_pools(&ls, &a, &mut rng(3)).unwrap();
        let mut seen = HashSet::new();
        for (d, pool) in pools.iter().enumerate() {
            for &i in pool {
                assert!(seen.insert(i), "index {i} assigned twice");
                assert!(a.holds(d, ls[i]));
            }
        }
    }

    #[test]
    fn split_ratios() {
        let s = split_pool(0, (0..57).collect(), &mut rng(0));
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (47, 5, 5));
    }

    #[test]
    fn trim_and_top_up_to_threshold() {
        let ls = labels(50);
        let a = allocate_labels(2, 10, 30, &mut rng(4)).unwrap();
        let shards = distribute_samples(&ls, &a, 64, &mut rng(5)).unwrap();
        for s in &shards {
            assert_eq!(s.train.len(), 64);
            assert!(s.resampled_count > 0);
            for &i in s.train.iter().chain(&s.val).chain(&s.test) {
                assert!(a.holds(s.device_id, ls[i]));
            }
        }
        let shards = distribute_samples(&ls, &a, 3, &mut rng(5)).unwrap();
        assert!(shards.iter().all(|s| s.train.len() == 3 && s.resampled_count == 0));
        assert!(distribute_samples(&ls, &a, 0, &mut rng(5)).is_err());
    }

    #[test]
    fn missing_label_is_an_error() {
        let ls: Vec<usize> = (0..90).map(|i| i % 9).collect();
        let a = LabelAllocation {
            k: 1,
            num_classes: 10,
            devices: vec![vec![9]],
        };
        assert!(matches!(
            distribute_samples(&ls, &a, 5, &mut rng(0)),
            Err(Error::EmptyLabel { label: 9 })
        ));
    }

    fn shard(n: usize) -> ClientShard {
        ClientShard {
            device_id: 0,
            train: (0..n).collect(),
            val: vec![n],
            test: vec![n + 1],
            resampled_count: 0,
        }
    }

    #[test]
    fn zero_variance_is_identity() {
        let shards = vec![shard(400), shard(17)];
        assert_eq!(apply_quantity_skew(shards.clone(), 0.0, &mut rng(0)).unwrap(), shards);
    }

    #[test]
    fn skew_bounds() {
        for seed in 0..200 {
            let out = apply_quantity_skew(vec![shard(400)], 0.3, &mut rng(seed)).unwrap();
            let n = out[0].train.len();
            assert!((280..=400).contains(&n), "{n}");
            assert_eq!(out[0].val, vec![400]);
        }
        assert!(apply_quantity_skew(vec![shard(4)], 1.5, &mut rng(0)).is_err());
        assert!(apply_quantity_skew(vec![shard(0)], 0.5, &mut rng(0)).is_err());
    }

    #[test]
    fn high_variance_mean_keep_fraction() {
        // keep fraction ~ U[0.1, 1] has mean 0.55.
        let shards: Vec<ClientShard> = (0..2000).map(|_| shard(1000)).collect();
        let out = apply_quantity_skew(shards, 0.9, &mut rng(7)).unwrap();
        let mean = out.iter().map(|s| s.train.len() as f64 / 1000.0).sum::<f64>() / out.len() as f64;
        assert!((mean - 0.55).abs() < 0.05, "{mean}");
    }
}
