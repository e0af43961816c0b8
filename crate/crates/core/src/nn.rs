//! Feed-forward softmax classifier with hand-derived backpropagation.
//!
//! Parameters live in a single flat [`ParamVector`]. Each dense layer owns one
//! contiguous segment holding its weight matrix (row-major, `in_dim x out_dim`)
//! followed by its bias. The last dense layer is tagged `"head"`; earlier ones
//! are tagged `"dense0"`, `"dense1"`, ... in order.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const HEAD_TAG: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Relu,
    Dropout,
    SoftmaxOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            dropout_rate: 0.0,
        }
    }

    pub fn relu(dim: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
            dropout_rate: 0.0,
        }
    }

    pub fn dropout(dim: usize, rate: f64) -> Self {
        Self {
            kind: LayerKind::Dropout,
            in_dim: dim,
            out_dim: dim,
            dropout_rate: rate,
        }
    }

    pub fn softmax_output(classes: usize) -> Self {
        Self {
            kind: LayerKind::SoftmaxOutput,
            in_dim: classes,
            out_dim: classes,
            dropout_rate: 0.0,
        }
    }

    fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim * self.out_dim + self.out_dim,
            _ => 0,
        }
    }
}

/// Builds `input -> [dense, relu, dropout]* -> dense -> softmax`.
pub fn mlp_layers(input_dim: usize, hidden: &[usize], dropout: f64, classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = input_dim;
    for &h in hidden {
        layers.push(LayerSpec::dense(prev, h));
        layers.push(LayerSpec::relu(h));
        if dropout > 0.0 {
            layers.push(LayerSpec::dropout(h, dropout));
        }
        prev = h;
    }
    layers.push(LayerSpec::dense(prev, classes));
    layers.push(LayerSpec::softmax_output(classes));
    layers
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tag: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector with a named segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Arc<[Segment]>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Arc<[Segment]>) -> Result<Self> {
        let mut expected = 0;
        for (i, seg) in segments.iter().enumerate() {
            if seg.offset != expected {
                return Err(Error::LayoutMismatch(format!(
                    "segment `{}` starts at {} but previous ends at {}",
                    seg.tag, seg.offset, expected
                )));
            }
            if segments[..i].iter().any(|s| s.tag == seg.tag) {
                return Err(Error::LayoutMismatch(format!("duplicate tag `{}`", seg.tag)));
            }
            expected += seg.len;
        }
        if expected != values.len() {
            return Err(Error::LayoutMismatch(format!(
                "segments cover {} values, vector has {}",
                expected,
                values.len()
            )));
        }
        Ok(Self { values, segments })
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self {
            values: vec![0.0; other.values.len()],
            segments: Arc::clone(&other.segments),
        }
    }

    /// New vector with `other`'s layout.
    pub fn with_layout_of(other: &ParamVector, values: Vec<f64>) -> Result<Self> {
        if values.len() != other.values.len() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} values, got {}",
                other.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            segments: Arc::clone(&other.segments),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.segments, &other.segments) || self.segments == other.segments
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} segments / {} values vs {} segments / {} values",
                self.segments.len(),
                self.values.len(),
                other.segments.len(),
                other.values.len()
            )))
        }
    }

    fn find(&self, tag: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.tag == tag)
            .ok_or_else(|| Error::UnknownSegment(tag.to_string()))
    }

    pub fn has_segment(&self, tag: &str) -> bool {
        self.segments.iter().any(|s| s.tag == tag)
    }

    pub fn segment(&self, tag: &str) -> Result<&[f64]> {
        let seg = self.find(tag)?;
        Ok(&self.values[seg.offset..seg.offset + seg.len])
    }

    pub fn segment_mut(&mut self, tag: &str) -> Result<&mut [f64]> {
        let (offset, len) = {
            let seg = self.find(tag)?;
            (seg.offset, seg.len)
        };
        Ok(&mut self.values[offset..offset + len])
    }

    pub fn replace_segment(&mut self, tag: &str, values: &[f64]) -> Result<()> {
        let dst = self.segment_mut(tag)?;
        if dst.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: dst.len(),
                got: values.len(),
            });
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    /// `self - other`, element-wise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self {
            values,
            segments: Arc::clone(&self.segments),
        })
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `params - lr * (grad + extra)`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64, extra: Option<&ParamVector>) -> Result<ParamVector> {
    params.check_layout(grad)?;
    let mut out = params.values.clone();
    match extra {
        Some(extra) => {
            params.check_layout(extra)?;
            for ((w, g), e) in out.iter_mut().zip(&grad.values).zip(&extra.values) {
                *w -= lr * (g + e);
            }
        }
        None => {
            for (w, g) in out.iter_mut().zip(&grad.values) {
                *w -= lr * g;
            }
        }
    }
    Ok(ParamVector {
        values: out,
        segments: Arc::clone(&params.segments),
    })
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidBatch("batch is empty".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::InvalidBatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidBatch(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Forward-pass behaviour. Training draws dropout masks from the given stream.
pub enum Mode<'a> {
    Train(&'a mut RngStream),
    Eval,
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: ParamVector,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug)]
struct DenseSlot {
    layer: usize,
    offset: usize,
    in_dim: usize,
    out_dim: usize,
}

/// A validated layer stack plus its parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<LayerSpec>,
    dense: Vec<DenseSlot>,
    layout: Arc<[Segment]>,
    input_dim: usize,
    classes: usize,
}

enum Cache {
    Dense { input: Array2<f64> },
    Relu { pre: Array2<f64> },
    Dropout { mask: Option<Array2<f64>> },
    Passthrough,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::ModelSpec("empty layer list".into()))?;
        let mut dense = Vec::new();
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut prev_out = first.in_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::ModelSpec(format!("layer {i} has a zero dimension")));
            }
            if l.in_dim != prev_out {
                return Err(Error::ModelSpec(format!(
                    "layer {i} expects {} inputs but previous layer emits {prev_out}",
                    l.in_dim
                )));
            }
            match l.kind {
                LayerKind::Dense => {
                    dense.push(DenseSlot {
                        layer: i,
                        offset,
                        in_dim: l.in_dim,
                        out_dim: l.out_dim,
                    });
                    offset += l.param_count();
                }
                LayerKind::Relu => {}
                LayerKind::Dropout => {
                    if !(0.0..1.0).contains(&l.dropout_rate) {
                        return Err(Error::ModelSpec(format!(
                            "layer {i} dropout rate {} outside [0, 1)",
                            l.dropout_rate
                        )));
                    }
                }
                LayerKind::SoftmaxOutput => {
                    if i + 1 != layers.len() {
                        return Err(Error::ModelSpec("softmax-output must be the final layer".into()));
                    }
                }
            }
            if l.kind != LayerKind::Dense && l.in_dim != l.out_dim {
                return Err(Error::ModelSpec(format!("layer {i} must preserve its dimension")));
            }
            prev_out = l.out_dim;
        }
        if dense.is_empty() {
            return Err(Error::ModelSpec("no dense layer".into()));
        }
        if prev_out < 2 {
            return Err(Error::ModelSpec("output must have at least two classes".into()));
        }
        let last = dense.len() - 1;
        for (j, slot) in dense.iter().enumerate() {
            let tag = if j == last {
                HEAD_TAG.to_string()
            } else {
                format!("dense{j}")
            };
            segments.push(Segment {
                tag,
                offset: slot.offset,
                len: slot.in_dim * slot.out_dim + slot.out_dim,
            });
        }
        Ok(Self {
            input_dim: first.in_dim,
            classes: prev_out,
            layers,
            dense,
            layout: segments.into(),
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.layout.iter().map(|s| s.len).sum()
    }

    pub fn layout(&self) -> Arc<[Segment]> {
        Arc::clone(&self.layout)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = <RngStream as rand::SeedableRng>::seed_from_u64(seed);
        let mut values = vec![0.0; self.param_count()];
        for slot in &self.dense {
            let bound = (6.0 / (slot.in_dim + slot.out_dim) as f64).sqrt();
            for w in &mut values[slot.offset..slot.offset + slot.in_dim * slot.out_dim] {
                *w = rng.random_range(-bound..bound);
            }
        }
        ParamVector {
            values,
            segments: self.layout(),
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&params.segments, &self.layout) || *params.segments == *self.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch("parameters do not match this network".into()))
        }
    }

    fn weights<'p>(&self, params: &'p ParamVector, slot: &DenseSlot) -> (ArrayView2<'p, f64>, &'p [f64]) {
        let n_w = slot.in_dim * slot.out_dim;
        let w = &params.values[slot.offset..slot.offset + n_w];
        let b = &params.values[slot.offset + n_w..slot.offset + n_w + slot.out_dim];
        let w = ArrayView2::from_shape((slot.in_dim, slot.out_dim), w).expect("segment sized by layout");
        (w, b)
    }

    fn check_features(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: features.ncols(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(())
    }

    fn forward(
        &self,
        params: &ParamVector,
        features: ArrayView2<f64>,
        mut mode: Mode<'_>,
        keep: bool,
    ) -> (Array2<f64>, Vec<Cache>) {
        let mut act = features.to_owned();
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut dense_iter = self.dense.iter();
        for layer in &self.layers {
            let cache = match layer.kind {
                LayerKind::Dense => {
                    let slot = dense_iter.next().expect("dense slot per dense layer");
                    let (w, b) = self.weights(params, slot);
                    let mut z = act.dot(&w);
                    z += &ndarray::ArrayView1::from(b);
                    let input = std::mem::replace(&mut act, z);
                    Cache::Dense { input }
                }
                LayerKind::Relu => {
                    let pre = if keep { Some(act.clone()) } else { None };
                    act.mapv_inplace(|v| v.max(0.0));
                    match pre {
                        Some(pre) => Cache::Relu { pre },
                        None => Cache::Passthrough,
                    }
                }
                LayerKind::Dropout => match &mut mode {
                    Mode::Train(rng) if layer.dropout_rate > 0.0 => {
                        let keep_p = 1.0 - layer.dropout_rate;
                        let scale = 1.0 / keep_p;
                        let mut mask = Array2::<f64>::zeros(act.raw_dim());
                        for m in mask.iter_mut() {
                            if rng.random::<f64>() < keep_p {
                                *m = scale;
                            }
                        }
                        act *= &mask;
                        Cache::Dropout { mask: Some(mask) }
                    }
                    _ => Cache::Dropout { mask: None },
                },
                LayerKind::SoftmaxOutput => Cache::Passthrough,
            };
            if keep {
                caches.push(cache);
            }
        }
        (act, caches)
    }

    /// Mean softmax cross-entropy and its gradient with respect to `params`.
    pub fn loss_and_grad(&self, params: &ParamVector, batch: &Batch, mode: Mode<'_>) -> Result<LossGrad> {
        self.check_params(params)?;
        self.check_features(&batch.features.view())?;
        if batch.is_empty() {
            return Err(Error::InvalidBatch("batch is empty".into()));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::InvalidBatch(format!("label {bad} out of range")));
        }
        let (logits, caches) = self.forward(params, batch.features.view(), mode, true);
        let n = batch.len() as f64;

        let mut loss = 0.0;
        let mut predictions = Vec::with_capacity(batch.len());
        let mut delta = Array2::<f64>::zeros(logits.raw_dim());
        for ((row, mut d), &y) in logits.outer_iter().zip(delta.outer_iter_mut()).zip(&batch.labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[y];
            for (j, (dj, &v)) in d.iter_mut().zip(row.iter()).enumerate() {
                let p = (v - lse).exp();
                *dj = (p - if j == y { 1.0 } else { 0.0 }) / n;
            }
            predictions.push(argmax(row.iter().copied()));
        }
        loss /= n;

        let mut grad = vec![0.0; params.len()];
        let mut dense_iter = self.dense.iter().rev();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            match (layer.kind, cache) {
                (LayerKind::Dense, Cache::Dense { input }) => {
                    let slot = dense_iter.next().expect("dense slot per dense layer");
                    let (w, _) = self.weights(params, slot);
                    let g_w = input.t().dot(&delta);
                    let g_b: Array1<f64> = delta.sum_axis(Axis(0));
                    let n_w = slot.in_dim * slot.out_dim;
                    let dst = &mut grad[slot.offset..slot.offset + n_w + slot.out_dim];
                    for (d, v) in dst[..n_w].iter_mut().zip(g_w.iter()) {
                        *d = *v;
                    }
                    for (d, v) in dst[n_w..].iter_mut().zip(g_b.iter()) {
                        *d = *v;
                    }
                    if slot.layer > 0 {
                        delta = delta.dot(&w.t());
                    }
                }
                (LayerKind::Relu, Cache::Relu { pre }) => {
                    ndarray::Zip::from(&mut delta).and(&pre).for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                (LayerKind::Dropout, Cache::Dropout { mask: Some(mask) }) => {
                    delta *= &mask;
                }
                _ => {}
            }
        }

        Ok(LossGrad {
            loss,
            grad: ParamVector {
                values: grad,
                segments: Arc::clone(&params.segments),
            },
            predictions,
        })
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, params: &ParamVector, features: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.check_params(params)?;
        self.check_features(&features)?;
        let (logits, _) = self.forward(params, features, Mode::Eval, false);
        Ok(logits.outer_iter().map(|r| argmax(r.iter().copied())).collect())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
