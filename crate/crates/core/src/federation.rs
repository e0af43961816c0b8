//! Communication rounds: select devices, train them locally (in parallel),
//! aggregate at a barrier, evaluate, record.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregators::{init_aggregator, AggregatorKind, AggregatorState, ClientUpdate, LocalConfig, ProtocolState};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::heterogeneity::{self, IidLevel};
use crate::nn::{mlp_layers, Network, ParamVector};
use crate::partition::{build_partition, ClientShard, PartitionManifest, PartitionParams};
use crate::rng::{self, tag};

const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Uniform,
    /// The `active_count` devices with the highest last-known training loss;
    /// never-selected devices rank first, ties go to the lower id.
    LossBiased,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Union of every device's test shard.
    #[default]
    ShardUnion,
    /// A separate held-out test set supplied by the caller.
    GlobalTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn build(&self, input_dim: usize, classes: usize) -> Result<Network> {
        Network::new(mlp_layers(input_dim, &self.hidden, self.dropout, classes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub model: ModelConfig,
    pub aggregator: AggregatorKind,
    pub num_devices: usize,
    pub active_count: usize,
    pub rounds: usize,
    /// Labels per device.
    pub k: usize,
    /// Train samples per device before quantity skew.
    pub max_samples: usize,
    /// Quantity variance in `[0, 1]`.
    pub var: f64,
    pub local: LocalConfig,
    pub seed: u64,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub eval: EvalTarget,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::invalid("need at least one device"));
        }
        if self.active_count == 0 || self.active_count > self.num_devices {
            return Err(Error::invalid(format!(
                "active count {} must lie in [1, {}]",
                self.active_count, self.num_devices
            )));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("need at least one round"));
        }
        if !(0.0..=1.0).contains(&self.var) {
            return Err(Error::invalid(format!("quantity variance {} outside [0, 1]", self.var)));
        }
        self.local.validate()
    }

    pub fn partition_params(&self) -> PartitionParams {
        PartitionParams {
            k: self.k,
            num_devices: self.num_devices,
            max_samples: self.max_samples,
            var: self.var,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub macro_f1: f64,
    pub mean_train_loss: f64,
    /// Only filled when timing is enabled; wall time is not reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Where the partition manifest was written, when it was.
    #[serde(default)]
    pub manifest_path: Option<String>,
    pub curve: Vec<RoundRecord>,
    pub best_f1: f64,
    /// 1-based.
    pub best_round: usize,
    pub emd: f64,
    pub iid_level: Option<IidLevel>,
}

impl ExperimentResult {
    pub fn f1_curve(&self) -> Vec<f64> {
        self.curve.iter().map(|r| r.macro_f1).collect()
    }
}

/// Uniform sample of `active_count` distinct devices, sorted, drawn from a
/// stream keyed by `(seed, round)` only.
pub fn select_active(num_devices: usize, active_count: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if active_count == 0 || active_count > num_devices {
        return Err(Error::invalid(format!(
            "cannot select {active_count} of {num_devices} devices"
        )));
    }
    let mut rng = rng::stream(seed, &[tag::SELECTION, round as u64]);
    let mut ids = index::sample(&mut rng, num_devices, active_count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

pub fn select_loss_biased(last_loss: &[Option<f64>], active_count: usize) -> Result<Vec<usize>> {
    if active_count == 0 || active_count > last_loss.len() {
        return Err(Error::invalid(format!(
            "cannot select {active_count} of {} devices",
            last_loss.len()
        )));
    }
    let mut order: Vec<usize> = (0..last_loss.len()).collect();
    order.sort_by(|&a, &b| {
        let la = last_loss[a].unwrap_or(f64::INFINITY);
        let lb = last_loss[b].unwrap_or(f64::INFINITY);
        lb.total_cmp(&la).then(a.cmp(&b))
    });
    let mut ids = order[..active_count].to_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Unweighted mean of per-class F1 over the classes present in `labels`.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("macro F1 of an empty set"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::invalid(format!("class index outside [0, {num_classes})")));
        }
        support[y] += 1;
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if support[c] == 0 {
            continue;
        }
        present += 1;
        let fn_ = support[c] - tp[c];
        let denom = 2 * tp[c] + fp[c] + fn_;
        sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok(sum / present as f64)
}

fn predict_chunked(
    network: &Network,
    params: &ParamVector,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = dataset.gather(chunk);
        out.extend(network.predict(params, x.view())?);
    }
    Ok(out)
}

/// Macro F1 over the union of all device test shards. FedPer devices predict
/// their own shard with their own head; predictions are pooled before
/// scoring.
pub fn evaluate(state: &AggregatorState, network: &Network, shards: &[ClientShard], dataset: &Dataset) -> Result<f64> {
    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    match &state.protocol {
        ProtocolState::FedPer { .. } => {
            for shard in shards {
                if shard.test.is_empty() {
                    continue;
                }
                let params = state.client_params(shard.device_id)?;
                predictions.extend(predict_chunked(network, &params, dataset, &shard.test)?);
                labels.extend(shard.test.iter().map(|&i| dataset.labels[i]));
            }
        }
        _ => {
            let union: Vec<usize> = shards.iter().flat_map(|s| s.test.iter().copied()).collect();
            predictions = predict_chunked(network, &state.global, dataset, &union)?;
            labels.extend(union.iter().map(|&i| dataset.labels[i]));
        }
    }
    if labels.is_empty() {
        return Err(Error::invalid("no test samples in any shard"));
    }
    macro_f1(&predictions, &labels, dataset.num_classes)
}

/// Macro F1 of the global model on a separate test set.
pub fn evaluate_global(state: &AggregatorState, network: &Network, test: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..test.len()).collect();
    let predictions = predict_chunked(network, &state.global, test, &all)?;
    macro_f1(&predictions, &test.labels, test.num_classes)
}

/// One configured experiment: partition, model, aggregator state and the
/// round loop.
pub struct Simulation<'a> {
    pub config: ExperimentConfig,
    pub network: Network,
    pub manifest: PartitionManifest,
    pub state: AggregatorState,
    dataset: &'a Dataset,
    test_set: Option<&'a Dataset>,
    last_loss: Vec<Option<f64>>,
    pool: Option<rayon::ThreadPool>,
    record_timing: bool,
}

impl<'a> Simulation<'a> {
    pub fn new(config: ExperimentConfig, dataset: &'a Dataset, test_set: Option<&'a Dataset>) -> Result<Self> {
        config.validate()?;
        if config.eval == EvalTarget::GlobalTest && test_set.is_none() {
            return Err(Error::invalid("global-test evaluation needs a test set"));
        }
        let mut manifest = build_partition(dataset, &config.partition_params())?;
        heterogeneity::annotate(&mut manifest, &dataset.labels)?;
        let network = config.model.build(dataset.dim(), dataset.num_classes)?;
        let state = init_aggregator(
            config.aggregator,
            &network,
            config.num_devices,
            config.seed,
            &config.local,
        )?;
        Ok(Self {
            last_loss: vec![None; config.num_devices],
            config,
            network,
            manifest,
            state,
            dataset,
            test_set,
            pool: None,
            record_timing: false,
        })
    }

    /// Bounds local-training parallelism. Results do not depend on it.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        self.pool = Some(pool);
        Ok(self)
    }

    pub fn with_timing(mut self, on: bool) -> Self {
        self.record_timing = on;
        self
    }

    pub fn select(&self, round: usize) -> Result<Vec<usize>> {
        match self.config.selection {
            Selection::Uniform => select_active(
                self.config.num_devices,
                self.config.active_count,
                round,
                self.config.seed,
            ),
            Selection::LossBiased => select_loss_biased(&self.last_loss, self.config.active_count),
        }
    }

    fn train_selected(&self, selected: &[usize], round: usize) -> Result<Vec<ClientUpdate>> {
        let job = || {
            selected
                .par_iter()
                .map(|&d| {
                    let mut rng = rng::stream(self.config.seed, &[tag::LOCAL_TRAIN, round as u64, d as u64]);
                    self.state.local_train(
                        &self.network,
                        d,
                        &self.manifest.shards[d].train,
                        self.dataset,
                        &self.config.local,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        match &self.pool {
            Some(pool) => pool.install(job),
            None => job(),
        }
    }

    pub fn evaluate(&self) -> Result<f64> {
        match (self.config.eval, self.test_set) {
            (EvalTarget::GlobalTest, Some(test)) => evaluate_global(&self.state, &self.network, test),
            _ => evaluate(&self.state, &self.network, &self.manifest.shards, self.dataset),
        }
    }

    /// Select, train, aggregate, evaluate. `round` is 1-based.
    pub fn run_round(&mut self, round: usize) -> Result<RoundRecord> {
        let started = Instant::now();
        let selected = self.select(round)?;
        let updates = self.train_selected(&selected, round)?;
        self.state.aggregate(&updates, &self.config.local)?;
        for u in &updates {
            self.last_loss[u.device_id] = Some(u.mean_loss);
        }
        let mean_train_loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64;
        let macro_f1 = self.evaluate()?;
        Ok(RoundRecord {
            round,
            selected,
            macro_f1,
            mean_train_loss,
            elapsed_ms: self.record_timing.then(|| started.elapsed().as_millis() as u64),
        })
    }

    /// Runs every round, handing each record to `on_round` as it completes.
    pub fn run(mut self, mut on_round: impl FnMut(&RoundRecord) -> Result<()>) -> Result<ExperimentResult> {
        let mut curve = Vec::with_capacity(self.config.rounds);
        for round in 1..=self.config.rounds {
            let record = self.run_round(round)?;
            on_round(&record)?;
            curve.push(record);
        }
        let (best_round, best_f1) = curve.iter().fold((0usize, f64::NEG_INFINITY), |(br, bf), r| {
            if r.macro_f1 > bf {
                (r.round, r.macro_f1)
            } else {
                (br, bf)
            }
        });
        Ok(ExperimentResult {
            emd: self.manifest.emd.unwrap_or(f64::NAN),
            iid_level: self.manifest.iid_level,
            config: self.config,
            manifest_path: None,
            curve,
            best_f1,
            best_round,
        })
    }
}

pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &Dataset,
    test_set: Option<&Dataset>,
) -> Result<ExperimentResult> {
    Simulation::new(config.clone(), dataset, test_set)?.run(|_| Ok(()))
}
