use fedhet::aggregators::{AggregatorKind, LocalConfig};
use fedhet::analysis::{
    best_f1, compare_table, moving_average, remove_outliers, table_csv, Curve, Param, TABLE_HEADER,
};
use fedhet::federation::{EvalTarget, ExperimentConfig, ExperimentResult, ModelConfig, RoundRecord, Selection};
use fedhet::heterogeneity::IidLevel;
use proptest::prelude::*;

fn curves() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 3..80)
}

proptest! {
    #[test]
    fn outlier_removal_is_idempotent(v in curves(), sigma in 0.5f64..4.0) {
        let c = Curve::new(v).unwrap();
        let once = remove_outliers(&c, sigma).unwrap();
        let twice = remove_outliers(&once.curve, sigma).unwrap();
        prop_assert_eq!(&once.curve, &twice.curve);
        prop_assert_eq!(once.curve.len(), c.len());
    }

    #[test]
    fn smoothing_preserves_length_and_never_raises_the_best(v in curves(), w in 1usize..8) {
        let c = Curve::new(v).unwrap();
        let s = moving_average(&c, w).unwrap();
        prop_assert_eq!(s.len(), c.len());
        prop_assert!(best_f1(&s).1 <= best_f1(&c).1 + 1e-12);
    }
}

fn result(kind: AggregatorKind, active: usize, best: f64) -> ExperimentResult {
    let config = ExperimentConfig {
        dataset: "mnist".into(),
        model: ModelConfig {
            hidden: vec![8],
            dropout: 0.0,
        },
        aggregator: kind,
        num_devices: 30,
        active_count: active,
        rounds: 2,
        k: 10,
        max_samples: 300,
        var: 0.0,
        local: LocalConfig::default(),
        seed: 0,
        selection: Selection::Uniform,
        eval: EvalTarget::ShardUnion,
    };
    let rec = |round, f1| RoundRecord {
        round,
        selected: vec![0],
        macro_f1: f1,
        mean_train_loss: 1.0,
        elapsed_ms: None,
    };
    ExperimentResult {
        config,
        manifest_path: None,
        curve: vec![rec(1, best / 2.0), rec(2, best)],
        best_f1: best,
        best_round: 2,
        emd: 0.2,
        iid_level: Some(IidLevel::High),
    }
}

#[test]
fn table_layout_matches_aggregators_by_active_devices() {
    let mut results = Vec::new();
    for (i, kind) in AggregatorKind::ALL.into_iter().enumerate() {
        results.push(result(kind, 15, 0.90 + 0.01 * i as f64));
        results.push(result(kind, 6, 0.95 - 0.01 * i as f64));
    }
    let rows = compare_table(&results, Param::ActiveCount).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows[..4].iter().all(|r| r.param_value == 6.0));
    assert!(rows[4..].iter().all(|r| r.param_value == 15.0));
    let flagged: Vec<(f64, &str)> = rows
        .iter()
        .filter(|r| r.is_best)
        .map(|r| (r.param_value, r.aggregator.as_str()))
        .collect();
    assert_eq!(flagged, vec![(6.0, "FedAvg"), (15.0, "SCAFFOLD")]);
    let csv = table_csv(&rows);
    assert!(csv.starts_with(&format!("{TABLE_HEADER}\n")));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn ties_are_all_flagged_and_single_rows_win() {
    let rows = compare_table(&[result(AggregatorKind::FedAvg, 6, 0.9)], Param::ActiveCount).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].is_best);
    let tie = [
        result(AggregatorKind::FedAvg, 6, 0.9),
        result(AggregatorKind::FedProx, 6, 0.9),
    ];
    assert!(compare_table(&tie, Param::ActiveCount)
        .unwrap()
        .iter()
        .all(|r| r.is_best));
    assert!(compare_table(&[], Param::ActiveCount).is_err());
}

#[test]
fn spiky_plateau_loses_its_spike() {
    let mut v = vec![0.4; 20];
    v[7] = 0.9;
    let c = Curve::new(v).unwrap();
    let r = remove_outliers(&c, 3.0).unwrap();
    assert_eq!(best_f1(&r.curve), (1, 0.4));
}
