//! FedAvg, FedProx, FedPer and SCAFFOLD over flat parameter vectors.
//!
//! Local training is a pure function of the server state: it returns a
//! [`ClientUpdate`] and never touches per-client state. Everything a client
//! persists between rounds (SCAFFOLD control variates, FedPer heads) is
//! written by [`AggregatorState::aggregate`], the round barrier.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Mode, Network, ParamVector, HEAD_TAG};
use crate::rng::{self, tag, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    FedAvg,
    FedProx,
    FedPer,
    Scaffold,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [Self::FedAvg, Self::FedProx, Self::FedPer, Self::Scaffold];
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FedAvg => "FedAvg",
            Self::FedProx => "FedProx",
            Self::FedPer => "FedPer",
            Self::Scaffold => "SCAFFOLD",
        })
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Self::FedAvg),
            "fedprox" => Ok(Self::FedProx),
            "fedper" => Ok(Self::FedPer),
            "scaffold" => Ok(Self::Scaffold),
            other => Err(Error::invalid(format!("unknown aggregator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// FedProx proximal weight.
    pub mu: f64,
    /// Segments FedPer keeps on the device.
    pub personal_tags: Vec<String>,
    /// SCAFFOLD server step size.
    pub global_lr: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 50,
            lr: 0.01,
            mu: 0.001,
            personal_tags: vec![HEAD_TAG.to_string()],
            global_lr: 1.0,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid(format!("mu {} must be non-negative", self.mu)));
        }
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "global learning rate {} must be positive",
                self.global_lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub device_id: usize,
    pub params_after: ParamVector,
    pub n_train: usize,
    /// `c_i+ - c_i`, SCAFFOLD only.
    pub control_delta: Option<ParamVector>,
    pub local_steps: usize,
    /// Mean training loss over this client's local steps.
    pub mean_loss: f64,
}

/// Personal segment values of one FedPer client, in layout order.
pub type PersonalSegments = Vec<(String, Vec<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolState {
    Plain,
    Scaffold {
        server_control: ParamVector,
        client_controls: Vec<ParamVector>,
    },
    FedPer {
        client_heads: Vec<PersonalSegments>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorState {
    pub kind: AggregatorKind,
    pub global: ParamVector,
    pub num_devices: usize,
    pub protocol: ProtocolState,
}

fn personal_segments(params: &ParamVector, tags: &[String]) -> Result<PersonalSegments> {
    let mut out = Vec::new();
    for seg in params.segments() {
        if tags.contains(&seg.tag) {
            out.push((seg.tag.clone(), params.segment(&seg.tag)?.to_vec()));
        }
    }
    for t in tags {
        if !params.has_segment(t) {
            return Err(Error::UnknownSegment(t.clone()));
        }
    }
    Ok(out)
}

pub fn init_aggregator(
    kind: AggregatorKind,
    network: &Network,
    num_devices: usize,
    seed: u64,
    cfg: &LocalConfig,
) -> Result<AggregatorState> {
    cfg.validate()?;
    if num_devices == 0 {
        return Err(Error::invalid("need at least one device"));
    }
    let global = network.init(rng::derive_seed(seed, &[tag::MODEL_INIT]));
    let protocol = match kind {
        AggregatorKind::FedAvg | AggregatorKind::FedProx => ProtocolState::Plain,
        AggregatorKind::Scaffold => {
            let zero = ParamVector::zeros_like(&global);
            ProtocolState::Scaffold {
                server_control: zero.clone(),
                client_controls: vec![zero; num_devices],
            }
        }
        AggregatorKind::FedPer => {
            if cfg.personal_tags.is_empty() {
                return Err(Error::invalid("FedPer needs at least one personal segment"));
            }
            let heads = personal_segments(&global, &cfg.personal_tags)?;
            ProtocolState::FedPer {
                client_heads: vec![heads; num_devices],
            }
        }
    };
    Ok(AggregatorState {
        kind,
        global,
        num_devices,
        protocol,
    })
}

/// `n_k / sum(n)` for each update, in the given order.
pub fn aggregation_weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.n_train).sum();
    updates.iter().map(|u| u.n_train as f64 / total as f64).collect()
}

fn weighted_average(updates: &[&ClientUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.n_train).sum();
    let mut out = vec![0.0; updates[0].params_after.len()];
    for u in updates {
        let w = u.n_train as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(u.params_after.values()) {
            *o += w * v;
        }
    }
    out
}

impl AggregatorState {
    fn check_device(&self, device_id: usize) -> Result<()> {
        if device_id >= self.num_devices {
            return Err(Error::invalid(format!(
                "device {device_id} outside [0, {})",
                self.num_devices
            )));
        }
        Ok(())
    }

    pub fn server_control(&self) -> Option<&ParamVector> {
        match &self.protocol {
            ProtocolState::Scaffold { server_control, .. } => Some(server_control),
            _ => None,
        }
    }

    pub fn client_control(&self, device_id: usize) -> Option<&ParamVector> {
        match &self.protocol {
            ProtocolState::Scaffold { client_controls, .. } => client_controls.get(device_id),
            _ => None,
        }
    }

    pub fn client_head(&self, device_id: usize) -> Option<&PersonalSegments> {
        match &self.protocol {
            ProtocolState::FedPer { client_heads } => client_heads.get(device_id),
            _ => None,
        }
    }

    /// The model a device starts from (and predicts with): the global model,
    /// with the device's stored personal segments swapped in under FedPer.
    pub fn client_params(&self, device_id: usize) -> Result<ParamVector> {
        self.check_device(device_id)?;
        let mut params = self.global.clone();
        if let ProtocolState::FedPer { client_heads } = &self.protocol {
            for (tag, values) in &client_heads[device_id] {
                params.replace_segment(tag, values)?;
            }
        }
        Ok(params)
    }

    /// Runs `cfg.epochs` passes of shuffled mini-batch SGD on the device's
    /// train indices with the protocol's gradient correction.
    pub fn local_train(
        &self,
        network: &Network,
        device_id: usize,
        train: &[usize],
        dataset: &Dataset,
        cfg: &LocalConfig,
        rng: &mut RngStream,
    ) -> Result<ClientUpdate> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyShard {
                device: device_id,
                split: "train",
            });
        }
        let mut w = self.client_params(device_id)?;

        let scaffold_correction = match &self.protocol {
            ProtocolState::Scaffold {
                server_control,
                client_controls,
            } => Some(server_control.sub(&client_controls[device_id])?),
            _ => None,
        };
        let prox_mu = match self.kind {
            AggregatorKind::FedProx if cfg.mu > 0.0 => Some(cfg.mu),
            _ => None,
        };

        let mut order = train.to_vec();
        let mut steps = 0usize;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = dataset.batch(chunk)?;
                let lg = network.loss_and_grad(&w, &batch, Mode::Train(rng))?;
                let prox = match prox_mu {
                    Some(mu) => {
                        let mut d = w.sub(&self.global)?;
                        d.scale(mu);
                        Some(d)
                    }
                    None => None,
                };
                let extra = prox.as_ref().or(scaffold_correction.as_ref());
                w = nn::sgd_step(&w, &lg.grad, cfg.lr, extra)?;
                steps += 1;
                loss_sum += lg.loss;
            }
        }

        let control_delta = match &self.protocol {
            ProtocolState::Scaffold {
                server_control,
                client_controls,
            } => {
                let c_i = &client_controls[device_id];
                let mut c_plus = c_i.sub(server_control)?;
                let drift = self.global.sub(&w)?;
                c_plus.add_scaled(1.0 / (steps as f64 * cfg.lr), &drift)?;
                Some(c_plus.sub(c_i)?)
            }
            _ => None,
        };

        Ok(ClientUpdate {
            device_id,
            params_after: w,
            n_train: train.len(),
            control_delta,
            local_steps: steps,
            mean_loss: loss_sum / steps as f64,
        })
    }

    /// Merges client updates into the server state. Updates are processed in
    /// device-id order, so the result does not depend on the input order.
    pub fn aggregate(&mut self, updates: &[ClientUpdate], cfg: &LocalConfig) -> Result<()> {
        if updates.is_empty() {
            return Err(Error::invalid("no client updates to aggregate"));
        }
        let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
        sorted.sort_by_key(|u| u.device_id);
        for w in sorted.windows(2) {
            if w[0].device_id == w[1].device_id {
                return Err(Error::invalid(format!(
                    "duplicate update from device {}",
                    w[0].device_id
                )));
            }
        }
        for u in &sorted {
            self.check_device(u.device_id)?;
            self.global.check_layout(&u.params_after)?;
            if u.n_train == 0 {
                return Err(Error::invalid(format!("device {} reported zero samples", u.device_id)));
            }
        }

        match &mut self.protocol {
            ProtocolState::Plain => {
                let avg = weighted_average(&sorted);
                self.global = ParamVector::with_layout_of(&self.global, avg)?;
            }
            ProtocolState::FedPer { client_heads } => {
                let avg = weighted_average(&sorted);
                let mut next = ParamVector::with_layout_of(&self.global, avg)?;
                let tags: Vec<String> = client_heads[0].iter().map(|(t, _)| t.clone()).collect();
                for t in &tags {
                    next.replace_segment(t, self.global.segment(t)?)?;
                }
                let mut new_heads = Vec::with_capacity(sorted.len());
                for u in &sorted {
                    new_heads.push((u.device_id, personal_segments(&u.params_after, &tags)?));
                }
                self.global = next;
                for (d, heads) in new_heads {
                    client_heads[d] = heads;
                }
            }
            ProtocolState::Scaffold {
                server_control,
                client_controls,
            } => {
                let m = sorted.len() as f64;
                let mut deltas = Vec::with_capacity(sorted.len());
                for u in &sorted {
                    let delta = u.control_delta.as_ref().ok_or_else(|| {
                        Error::invalid(format!("SCAFFOLD update from {} lacks a control delta", u.device_id))
                    })?;
                    server_control.check_layout(delta)?;
                    deltas.push(delta);
                }
                let mut mean_step = ParamVector::zeros_like(&self.global);
                for u in &sorted {
                    mean_step.add_scaled(1.0 / m, &u.params_after.sub(&self.global)?)?;
                }
                let mut mean_delta = ParamVector::zeros_like(&self.global);
                for d in &deltas {
                    mean_delta.add_scaled(1.0 / m, d)?;
                }
                self.global.add_scaled(cfg.global_lr, &mean_step)?;
                server_control.add_scaled(m / self.num_devices as f64, &mean_delta)?;
                for (u, d) in sorted.iter().zip(deltas) {
                    client_controls[u.device_id].add_scaled(1.0, d)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_tabular;
    use crate::nn::{mlp_layers, Segment};
    use rand::SeedableRng;
    use std::sync::Arc;

    fn scalar(v: f64) -> ParamVector {
        let layout: Arc<[Segment]> = vec![Segment {
            tag: HEAD_TAG.into(),
            offset: 0,
            len: 1,
        }]
        .into();
        ParamVector::new(vec![v], layout).unwrap()
    }

    fn update(device_id: usize, n: usize, p: ParamVector) -> ClientUpdate {
        ClientUpdate {
            device_id,
            params_after: p,
            n_train: n,
            control_delta: None,
            local_steps: 1,
            mean_loss: 0.0,
        }
    }

    fn plain_state(p: ParamVector) -> AggregatorState {
        AggregatorState {
            kind: AggregatorKind::FedAvg,
            global: p,
            num_devices: 4,
            protocol: ProtocolState::Plain,
        }
    }

    #[test]
    fn weighted_average_of_scalars() {
        let mut s = plain_state(scalar(9.0));
        let cfg = LocalConfig::default();
        s.aggregate(&[update(0, 1, scalar(0.0)), update(1, 3, scalar(4.0))], &cfg)
            .unwrap();
        assert_eq!(s.global.values(), &[3.0]);

        let mut s = plain_state(scalar(9.0));
        s.aggregate(&[update(2, 7, scalar(1.25))], &cfg).unwrap();
        assert_eq!(s.global.values(), &[1.25]);
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        let cfg = LocalConfig::default();
        let mut s = plain_state(scalar(0.0));
        assert!(s.aggregate(&[], &cfg).is_err());
        assert!(s.aggregate(&[update(9, 1, scalar(0.0))], &cfg).is_err());
        assert!(s
            .aggregate(&[update(1, 1, scalar(0.0)), update(1, 1, scalar(0.0))], &cfg)
            .is_err());
        let net = Network::new(mlp_layers(2, &[], 0.0, 2)).unwrap();
        assert!(s.aggregate(&[update(1, 1, net.init(0))], &cfg).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        let ups: Vec<ClientUpdate> = (0..7).map(|d| update(d, 3 + d * 11, scalar(0.0))).collect();
        let w: f64 = aggregation_weights(&ups).iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    fn setup() -> (Network, Dataset) {
        let data = synth_tabular(3, 60, 4, 1).unwrap();
        let net = Network::new(mlp_layers(4, &[5], 0.0, 3)).unwrap();
        (net, data)
    }

    #[test]
    fn init_states() {
        let (net, _) = setup();
        let cfg = LocalConfig::default();
        let s = init_aggregator(AggregatorKind::Scaffold, &net, 3, 1, &cfg).unwrap();
        assert!(s.server_control().unwrap().values().iter().all(|&v| v == 0.0));
        assert!((0..3).all(|d| s.client_control(d).unwrap().values().iter().all(|&v| v == 0.0)));
        assert!(s.client_head(0).is_none());

        let s = init_aggregator(AggregatorKind::FedPer, &net, 3, 1, &cfg).unwrap();
        for d in 0..3 {
            let heads = s.client_head(d).unwrap();
            assert_eq!(heads[0].1.as_slice(), s.global.segment(HEAD_TAG).unwrap());
        }
        assert_eq!(s, init_aggregator(AggregatorKind::FedPer, &net, 3, 1, &cfg).unwrap());

        let bad = LocalConfig {
            personal_tags: vec!["nope".into()],
            ..LocalConfig::default()
        };
        assert!(init_aggregator(AggregatorKind::FedPer, &net, 3, 1, &bad).is_err());
    }

    #[test]
    fn fedprox_with_zero_mu_matches_fedavg() {
        let (net, data) = setup();
        let cfg = LocalConfig {
            mu: 0.0,
            batch_size: 7,
            epochs: 2,
            lr: 0.1,
            ..LocalConfig::default()
        };
        let idx: Vec<usize> = (0..40).collect();
        let avg = init_aggregator(AggregatorKind::FedAvg, &net, 2, 3, &cfg).unwrap();
        let prox = init_aggregator(AggregatorKind::FedProx, &net, 2, 3, &cfg).unwrap();
        let a = avg
            .local_train(&net, 1, &idx, &data, &cfg, &mut RngStream::seed_from_u64(5))
            .unwrap();
        let b = prox
            .local_train(&net, 1, &idx, &data, &cfg, &mut RngStream::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scaffold_single_full_batch_step() {
        let (net, data) = setup();
        let cfg = LocalConfig {
            batch_size: 60,
            epochs: 1,
            lr: 0.05,
            ..LocalConfig::default()
        };
        let idx: Vec<usize> = (0..60).collect();
        let avg = init_aggregator(AggregatorKind::FedAvg, &net, 2, 3, &cfg).unwrap();
        let sc = init_aggregator(AggregatorKind::Scaffold, &net, 2, 3, &cfg).unwrap();
        let a = avg
            .local_train(&net, 0, &idx, &data, &cfg, &mut RngStream::seed_from_u64(8))
            .unwrap();
        let b = sc
            .local_train(&net, 0, &idx, &data, &cfg, &mut RngStream::seed_from_u64(8))
            .unwrap();
        assert_eq!(a.params_after, b.params_after);
        assert_eq!(b.local_steps, 1);
        // c_i+ = (w_global - w_local) / lr when c = c_i = 0 and one step.
        let mut expected = sc.global.sub(&b.params_after).unwrap();
        expected.scale(1.0 / cfg.lr);
        assert!(b.control_delta.unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn local_steps_count_short_batches() {
        let (net, data) = setup();
        let cfg = LocalConfig {
            batch_size: 7,
            epochs: 3,
            ..LocalConfig::default()
        };
        let s = init_aggregator(AggregatorKind::FedAvg, &net, 1, 0, &cfg).unwrap();
        let u = s
            .local_train(
                &net,
                0,
                &(0..20).collect::<Vec<_>>(),
                &data,
                &cfg,
                &mut RngStream::seed_from_u64(0),
            )
            .unwrap();
        assert_eq!(u.local_steps, 9);
        assert!(s
            .local_train(&net, 0, &[], &data, &cfg, &mut RngStream::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn scaffold_server_control_bookkeeping() {
        let (net, data) = setup();
        let cfg = LocalConfig {
            batch_size: 10,
            lr: 0.05,
            ..LocalConfig::default()
        };
        let mut s = init_aggregator(AggregatorKind::Scaffold, &net, 5, 2, &cfg).unwrap();
        for round in 0..3u64 {
            let ups: Vec<ClientUpdate> = [0usize, 3]
                .iter()
                .map(|&d| {
                    let idx: Vec<usize> = (d * 10..d * 10 + 20).collect();
                    s.local_train(
                        &net,
                        d,
                        &idx,
                        &data,
                        &cfg,
                        &mut RngStream::seed_from_u64(round * 10 + d as u64),
                    )
                    .unwrap()
                })
                .collect();
            let before = s.server_control().unwrap().clone();
            let mut expected = before.clone();
            let mut mean = ParamVector::zeros_like(&before);
            for u in &ups {
                mean.add_scaled(0.5, u.control_delta.as_ref().unwrap()).unwrap();
            }
            expected.add_scaled(2.0 / 5.0, &mean).unwrap();
            s.aggregate(&ups, &cfg).unwrap();
            assert_eq!(s.server_control().unwrap(), &expected);
        }
    }

    #[test]
    fn fedper_keeps_heads_local() {
        let (net, data) = setup();
        let cfg = LocalConfig {
            batch_size: 10,
            lr: 0.2,
            ..LocalConfig::default()
        };
        let mut s = init_aggregator(AggregatorKind::FedPer, &net, 4, 2, &cfg).unwrap();
        let global_head = s.global.segment(HEAD_TAG).unwrap().to_vec();
        let untouched = s.client_head(2).unwrap().clone();
        let ups: Vec<ClientUpdate> = [0usize, 1]
            .iter()
            .map(|&d| {
                let idx: Vec<usize> = (d * 20..d * 20 + 20).collect();
                s.local_train(&net, d, &idx, &data, &cfg, &mut RngStream::seed_from_u64(d as u64))
                    .unwrap()
            })
            .collect();
        s.aggregate(&ups, &cfg).unwrap();
        assert_eq!(s.global.segment(HEAD_TAG).unwrap(), global_head.as_slice());
        assert_eq!(s.client_head(2).unwrap(), &untouched);
        for u in &ups {
            assert_eq!(
                s.client_head(u.device_id).unwrap()[0].1.as_slice(),
                u.params_after.segment(HEAD_TAG).unwrap()
            );
        }
        // Base layers are the weighted average.
        let base: Vec<f64> = ups[0]
            .params_after
            .segment("dense0")
            .unwrap()
            .iter()
            .zip(ups[1].params_after.segment("dense0").unwrap())
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        assert_eq!(s.global.segment("dense0").unwrap(), base.as_slice());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("SCAFFOLD".parse::<AggregatorKind>().unwrap(), AggregatorKind::Scaffold);
        assert_eq!("fedper".parse::<AggregatorKind>().unwrap(), AggregatorKind::FedPer);
        assert!("fedlc".parse::<AggregatorKind>().is_err());
    }
}
