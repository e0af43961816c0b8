use fedhet::aggregators::{AggregatorKind, LocalConfig};
use fedhet::datasets::{global_split, synth_tabular, Dataset};
use fedhet::federation::{evaluate, run_experiment, EvalTarget, ExperimentConfig, ModelConfig, Selection, Simulation};

fn data() -> Dataset {
    synth_tabular(7, 2100, 8, 13).unwrap()
}

fn config(kind: AggregatorKind) -> ExperimentConfig {
    ExperimentConfig {
        dataset: "synthetic".into(),
        model: ModelConfig {
            hidden: vec![16],
            dropout: 0.1,
        },
        aggregator: kind,
        num_devices: 10,
        active_count: 4,
        rounds: 10,
        k: 7,
        max_samples: 40,
        var: 0.0,
        local: LocalConfig {
            epochs: 1,
            batch_size: 10,
            lr: 0.05,
            ..LocalConfig::default()
        },
        seed: 17,
        selection: Selection::Uniform,
        eval: EvalTarget::ShardUnion,
    }
}

#[test]
fn runs_are_reproducible_for_every_aggregator() {
    let ds = data();
    for kind in AggregatorKind::ALL {
        let cfg = config(kind);
        let a = run_experiment(&cfg, &ds, None).unwrap();
        let b = run_experiment(&cfg, &ds, None).unwrap();
        assert_eq!(a, b, "{kind}");
        assert_eq!(a.curve.len(), cfg.rounds);
        assert!(a
            .curve
            .iter()
            .all(|r| (0.0..=1.0).contains(&r.macro_f1) && r.selected.len() == 4));
        let best = a.curve.iter().map(|r| r.macro_f1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_f1, best);
        assert_eq!(a.curve[a.best_round - 1].macro_f1, best);
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let ds = data();
    let cfg = config(AggregatorKind::Scaffold);
    let one = Simulation::new(cfg.clone(), &ds, None)
        .unwrap()
        .with_workers(1)
        .unwrap()
        .run(|_| Ok(()))
        .unwrap();
    let four = Simulation::new(cfg, &ds, None)
        .unwrap()
        .with_workers(4)
        .unwrap()
        .run(|_| Ok(()))
        .unwrap();
    assert_eq!(one, four);
}

#[test]
fn fedprox_without_penalty_reproduces_fedavg_curve() {
    let ds = data();
    let avg = run_experiment(&config(AggregatorKind::FedAvg), &ds, None).unwrap();
    let mut prox_cfg = config(AggregatorKind::FedProx);
    prox_cfg.local.mu = 0.0;
    let prox = run_experiment(&prox_cfg, &ds, None).unwrap();
    for (a, p) in avg.curve.iter().zip(&prox.curve) {
        assert!((a.macro_f1 - p.macro_f1).abs() <= 1e-9);
        assert_eq!(a.selected, p.selected);
    }
}

#[test]
fn train_loss_falls_on_iid_synthetic_data() {
    let ds = data();
    let r = run_experiment(&config(AggregatorKind::FedAvg), &ds, None).unwrap();
    assert!(r.curve[9].mean_train_loss < r.curve[0].mean_train_loss);
    assert!(r.best_f1 > 0.8, "{}", r.best_f1);
}

#[test]
fn local_settings_change_neither_partition_nor_selection() {
    let ds = data();
    let a = Simulation::new(config(AggregatorKind::FedAvg), &ds, None).unwrap();
    let mut other = config(AggregatorKind::FedPer);
    other.local.epochs = 3;
    other.local.lr = 0.2;
    let b = Simulation::new(other, &ds, None).unwrap();
    assert_eq!(a.manifest, b.manifest);
    for round in 1..=20 {
        assert_eq!(a.select(round).unwrap(), b.select(round).unwrap());
    }
}

#[test]
fn single_active_client_becomes_the_global_model() {
    let ds = data();
    let mut cfg = config(AggregatorKind::FedAvg);
    cfg.active_count = 1;
    let mut sim = Simulation::new(cfg, &ds, None).unwrap();
    let selected = sim.select(1).unwrap();
    let d = selected[0];
    let mut rng = fedhet::rng::stream(17, &[fedhet::rng::tag::LOCAL_TRAIN, 1, d as u64]);
    let update = sim
        .state
        .local_train(
            &sim.network,
            d,
            &sim.manifest.shards[d].train,
            &ds,
            &sim.config.local,
            &mut rng,
        )
        .unwrap();
    sim.run_round(1).unwrap();
    assert_eq!(sim.state.global, update.params_after);
}

#[test]
fn untrained_model_scores_near_chance() {
    let ds = synth_tabular(10, 2000, 10, 1).unwrap();
    let mut cfg = config(AggregatorKind::FedAvg);
    cfg.k = 10;
    let sim = Simulation::new(cfg, &ds, None).unwrap();
    let f1 = sim.evaluate().unwrap();
    assert!(f1 < 0.25, "{f1}");
}

#[test]
fn fedper_with_untouched_heads_matches_global_evaluation() {
    let ds = data();
    let per = Simulation::new(config(AggregatorKind::FedPer), &ds, None).unwrap();
    let avg = Simulation::new(config(AggregatorKind::FedAvg), &ds, None).unwrap();
    let f_per = evaluate(&per.state, &per.network, &per.manifest.shards, &ds).unwrap();
    let f_avg = evaluate(&avg.state, &avg.network, &avg.manifest.shards, &ds).unwrap();
    assert_eq!(f_per, f_avg);
}

#[test]
fn low_iid_partition_is_classified_low() {
    let ds = synth_tabular(10, 3000, 10, 1).unwrap();
    let mut cfg = config(AggregatorKind::FedAvg);
    cfg.k = 1;
    cfg.num_devices = 30;
    let r = Simulation::new(cfg, &ds, None).unwrap();
    assert_eq!(r.manifest.iid_level, Some(fedhet::heterogeneity::IidLevel::Low));
}

#[test]
fn global_test_evaluation_and_loss_biased_selection() {
    let ds = data();
    let split = global_split(&ds, 0.2, 3).unwrap();
    let mut cfg = config(AggregatorKind::FedAvg);
    cfg.eval = EvalTarget::GlobalTest;
    cfg.selection = Selection::LossBiased;
    assert!(Simulation::new(cfg.clone(), &split.train, None).is_err());
    let r = Simulation::new(cfg, &split.train, Some(&split.test))
        .unwrap()
        .run(|_| Ok(()))
        .unwrap();
    // Never-selected devices rank first, so the first rounds sweep the id range.
    assert_eq!(r.curve[0].selected, vec![0, 1, 2, 3]);
    assert_eq!(r.curve[1].selected, vec![4, 5, 6, 7]);
    assert!(r.best_f1 > 0.8);
}

#[test]
fn rejects_invalid_configs() {
    let ds = data();
    let mut cfg = config(AggregatorKind::FedAvg);
    cfg.active_count = 11;
    assert!(run_experiment(&cfg, &ds, None).is_err());
    let mut cfg = config(AggregatorKind::FedAvg);
    cfg.rounds = 0;
    assert!(run_experiment(&cfg, &ds, None).is_err());
}
