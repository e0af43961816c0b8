use std::collections::HashSet;

use fedhet::datasets::{synth_tabular, Dataset};
use fedhet::heterogeneity;
use fedhet::partition::{build_partition, PartitionManifest, PartitionParams};
use proptest::prelude::*;

fn dataset(classes: usize, n: usize) -> Dataset {
    synth_tabular(classes, n, classes, 7).unwrap()
}

fn params(k: usize, num_devices: usize, max_samples: usize, var: f64, seed: u64) -> PartitionParams {
    PartitionParams {
        k,
        num_devices,
        max_samples,
        var,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shards_respect_allocation_and_sizes(
        classes in 2usize..8,
        k_off in 0usize..8,
        devices in 1usize..12,
        s in 1usize..60,
        var in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let k = 1 + k_off % classes;
        let ds = dataset(classes, 40 * classes);
        let m = build_partition(&ds, &params(k, devices, s, var, seed)).unwrap();
        prop_assert_eq!(m.shards.len(), devices);
        let mut seen_eval = HashSet::new();
        for (d, shard) in m.shards.iter().enumerate() {
            prop_assert_eq!(shard.device_id, d);
            prop_assert_eq!(m.allocation.devices[d].len(), k);
            for &i in shard.train.iter().chain(&shard.val).chain(&shard.test) {
                prop_assert!(m.allocation.holds(d, ds.labels[i]));
            }
            // Validation and test samples come from disjoint pools.
            for &i in shard.val.iter().chain(&shard.test) {
                prop_assert!(seen_eval.insert(i));
            }
            let min_keep = (((1.0 - var) * s as f64).ceil() as usize).max(1);
            prop_assert!(shard.train.len() <= s);
            prop_assert!(shard.train.len() >= min_keep.min(s));
        }
    }

    #[test]
    fn partition_is_a_pure_function_of_params(seed in any::<u64>(), var in 0.0f64..=1.0) {
        let ds = dataset(5, 300);
        let p = params(2, 6, 20, var, seed);
        prop_assert_eq!(build_partition(&ds, &p).unwrap(), build_partition(&ds, &p).unwrap());
    }

    #[test]
    fn var_never_moves_the_allocation(seed in any::<u64>(), var in 0.0f64..=1.0) {
        let ds = dataset(6, 360);
        let base = build_partition(&ds, &params(3, 8, 25, 0.0, seed)).unwrap();
        let skewed = build_partition(&ds, &params(3, 8, 25, var, seed)).unwrap();
        prop_assert_eq!(&base.allocation, &skewed.allocation);
        for (b, s) in base.shards.iter().zip(&skewed.shards) {
            prop_assert_eq!(&b.val, &s.val);
            prop_assert_eq!(&b.test, &s.test);
            // Kept train samples are an order-preserving subsequence.
            let mut it = b.train.iter();
            prop_assert!(s.train.iter().all(|x| it.any(|y| y == x)));
        }
    }
}

#[test]
fn zero_variance_keeps_exactly_s() {
    let ds = dataset(10, 2000);
    let m = build_partition(&ds, &params(3, 10, 37, 0.0, 5)).unwrap();
    assert!(m.shards.iter().all(|s| s.train.len() == 37));
}

#[test]
fn top_up_is_recorded() {
    // 10 samples per class shared by many devices forces resampling.
    let ds = dataset(2, 20);
    let m = build_partition(&ds, &params(2, 4, 30, 0.0, 1)).unwrap();
    for s in &m.shards {
        assert_eq!(s.train.len(), 30);
        assert!(s.resampled_count > 0);
    }
}

#[test]
fn higher_variance_keeps_fewer_samples_on_average() {
    let ds = dataset(4, 400);
    let mean_total = |var: f64| {
        (0..100)
            .map(|seed| {
                build_partition(&ds, &params(2, 10, 30, var, seed))
                    .unwrap()
                    .total_train() as f64
            })
            .sum::<f64>()
            / 100.0
    };
    let (a, b, c) = (mean_total(0.0), mean_total(0.5), mean_total(0.9));
    assert!(a > b && b > c, "{a} {b} {c}");
}

#[test]
fn manifest_json_round_trip() {
    let ds = dataset(4, 200);
    let mut m = build_partition(&ds, &params(2, 5, 15, 0.4, 9)).unwrap();
    heterogeneity::annotate(&mut m, &ds.labels).unwrap();
    m.config_hash = Some("abc".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.write(&path).unwrap();
    let back = PartitionManifest::read(&path).unwrap();
    assert_eq!(back, m);
    // Bit-stable text.
    assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());
}

#[test]
fn rejects_bad_parameters() {
    let ds = dataset(4, 200);
    assert!(build_partition(&ds, &params(0, 5, 10, 0.0, 1)).is_err());
    assert!(build_partition(&ds, &params(5, 5, 10, 0.0, 1)).is_err());
    assert!(build_partition(&ds, &params(2, 0, 10, 0.0, 1)).is_err());
    assert!(build_partition(&ds, &params(2, 5, 0, 0.0, 1)).is_err());
    assert!(build_partition(&ds, &params(2, 5, 10, 1.5, 1)).is_err());
}
