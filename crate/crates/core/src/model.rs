//! The split network: a private dense+ReLU backbone, a shared dense feature
//! adapter producing the embedding, and a shared dense classifier head.
//!
//! Dense layers compute `out[j] = bias[j] + sum_i x[i] * weight[i][j]`,
//! accumulating the bias first and then inputs in index order. Weights are
//! stored row-major as `in_dim x out_dim`.
//!
//! Losses are unnormalized sums over the batch. Gradients are exact
//! reverse-mode derivatives of [`loss_total`]; the ReLU derivative at exactly
//! zero is taken as zero.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl NetworkShape {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let shape = Self {
            input_dim,
            hidden_dim,
            embed_dim,
            num_classes,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Length of the flat feature-adapter block.
    pub fn feature_len(&self) -> usize {
        self.hidden_dim * self.embed_dim + self.embed_dim
    }

    pub fn head_len(&self) -> usize {
        self.embed_dim * self.num_classes + self.num_classes
    }

    /// `d`, the number of shared adapter scalars.
    pub fn adapter_len(&self) -> usize {
        self.feature_len() + self.head_len()
    }

    pub fn backbone_len(&self) -> usize {
        self.input_dim * self.hidden_dim + self.hidden_dim
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_len("matrix elements", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            ensure_len("matrix columns", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

/// An affine map `x -> bias + x * weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        ensure_len("bias", weight.cols(), bias.len())?;
        Ok(Self { weight, bias })
    }

    /// Uniform init in `[-1/sqrt(in), 1/sqrt(in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        let bias = (0..out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Matrix {
                rows: in_dim,
                cols: out_dim,
                data: weight,
            },
            bias,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn len(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, x: &[f64], axis: &'static str) -> Result<Vec<f64>> {
        ensure_len(axis, self.in_dim(), x.len())?;
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.out_dim();
        let w = self.weight.as_slice();
        (0..cols)
            .map(|j| {
                let mut acc = self.bias[j];
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * w[i * cols + j];
                }
                acc
            })
            .collect()
    }

    fn extend_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(&self.bias);
    }

    fn from_flat(flat: &[f64], in_dim: usize, out_dim: usize) -> Self {
        let nw = in_dim * out_dim;
        Self {
            weight: Matrix {
                rows: in_dim,
                cols: out_dim,
                data: flat[..nw].to_vec(),
            },
            bias: flat[nw..nw + out_dim].to_vec(),
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.as_slice().iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Client-private backbone `input_dim -> hidden_dim`, followed by ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub layer: Dense,
}

impl BackboneParams {
    pub fn zeros(shape: &NetworkShape) -> Self {
        Self {
            layer: Dense::zeros(shape.input_dim, shape.hidden_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(shape: &NetworkShape, rng: &mut R) -> Self {
        Self {
            layer: Dense::init(shape.input_dim, shape.hidden_dim, rng),
        }
    }

    /// Weight row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layer.len());
        self.layer.extend_flat(&mut out);
        out
    }

    pub fn unflatten(shape: &NetworkShape, flat: &[f64]) -> Result<Self> {
        ensure_len("backbone parameters", shape.backbone_len(), flat.len())?;
        Ok(Self {
            layer: Dense::from_flat(flat, shape.input_dim, shape.hidden_dim),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layer.is_finite()
    }
}

/// The shared adapter: feature part `hidden_dim -> embed_dim` and classifier
/// head `embed_dim -> num_classes`.
///
/// Flat order: feature weight (row-major), feature bias, head weight
/// (row-major), head bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub feature: Dense,
    pub head: Dense,
}

impl AdapterParams {
    pub fn zeros(shape: &NetworkShape) -> Self {
        Self {
            feature: Dense::zeros(shape.hidden_dim, shape.embed_dim),
            head: Dense::zeros(shape.embed_dim, shape.num_classes),
        }
    }

    pub fn init<R: Rng + ?Sized>(shape: &NetworkShape, rng: &mut R) -> Self {
        let feature = Dense::init(shape.hidden_dim, shape.embed_dim, rng);
        let head = Dense::init(shape.embed_dim, shape.num_classes, rng);
        Self { feature, head }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature.len() + self.head.len());
        self.feature.extend_flat(&mut out);
        self.head.extend_flat(&mut out);
        out
    }

    pub fn unflatten(shape: &NetworkShape, flat: &[f64]) -> Result<Self> {
        ensure_len("adapter parameters", shape.adapter_len(), flat.len())?;
        let (f, h) = flat.split_at(shape.feature_len());
        Ok(Self {
            feature: Dense::from_flat(f, shape.hidden_dim, shape.embed_dim),
            head: Dense::from_flat(h, shape.embed_dim, shape.num_classes),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.feature.is_finite() && self.head.is_finite()
    }
}

/// A borrowed mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    inputs: &'a Matrix,
    rows: &'a [usize],
    labels: &'a [usize],
}

impl<'a> LabeledBatch<'a> {
    /// Batch over `rows` of `inputs`; `labels` is indexed by row, like `inputs`.
    pub fn new(
        inputs: &'a Matrix,
        labels: &'a [usize],
        rows: &'a [usize],
        num_classes: usize,
    ) -> Result<Self> {
        ensure_len("batch labels", inputs.rows(), labels.len())?;
        if rows.is_empty() {
            return Err(Error::invalid("batch", "must contain at least one sample"));
        }
        for &r in rows {
            if r >= inputs.rows() {
                return Err(Error::invalid("batch", format!("row {r} out of range")));
            }
            if labels[r] >= num_classes {
                return Err(Error::invalid(
                    "batch",
                    format!("label {} out of range for {num_classes} classes", labels[r]),
                ));
            }
        }
        Ok(Self {
            inputs,
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [f64], usize)> + '_ {
        self.rows
            .iter()
            .map(move |&r| (self.inputs.row(r), self.labels[r]))
    }
}

/// Per-class alignment targets, held fixed for a round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: BTreeMap<usize, Vec<f64>>,
}

impl AnchorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class_id: usize, anchor: Vec<f64>) {
        self.anchors.insert(class_id, anchor);
    }

    pub fn get(&self, class_id: usize) -> Option<&[f64]> {
        self.anchors.get(&class_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.anchors.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        for v in self.anchors.values() {
            ensure_len("anchor", embed_dim, v.len())?;
            if !v.iter().all(|a| a.is_finite()) {
                return Err(Error::invalid("anchor", "non-finite entry"));
            }
        }
        Ok(())
    }
}

impl FromIterator<(usize, Vec<f64>)> for AnchorSet {
    fn from_iter<I: IntoIterator<Item = (usize, Vec<f64>)>>(iter: I) -> Self {
        Self {
            anchors: iter.into_iter().collect(),
        }
    }
}

fn relu(v: &mut [f64]) {
    for a in v {
        if *a <= 0.0 {
            *a = 0.0;
        }
    }
}

fn check_chain(backbone: &BackboneParams, feature: &Dense) -> Result<()> {
    ensure_len(
        "feature adapter input (hidden_dim)",
        backbone.layer.out_dim(),
        feature.in_dim(),
    )
}

/// `F(x) = feature(relu(backbone(x)))`; the classifier head is not involved.
pub fn embed(x: &[f64], backbone: &BackboneParams, feature: &Dense) -> Result<Vec<f64>> {
    check_chain(backbone, feature)?;
    let mut h = backbone.layer.forward(x, "input (input_dim)")?;
    relu(&mut h);
    Ok(feature.forward_unchecked(&h))
}

/// Raw class scores; no softmax.
pub fn logits(x: &[f64], backbone: &BackboneParams, adapter: &AdapterParams) -> Result<Vec<f64>> {
    let e = embed(x, backbone, &adapter.feature)?;
    adapter.head.forward(&e, "classifier head input (embed_dim)")
}

/// `-log softmax(logits)[label]` via the max-shifted log-sum-exp.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    max + sum.ln() - logits[label]
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn loss_ce(batch: &LabeledBatch<'_>, backbone: &BackboneParams, adapter: &AdapterParams) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in batch.iter() {
        total += cross_entropy(&logits(x, backbone, adapter)?, y);
    }
    Ok(total)
}

/// Squared distance of each embedding to its class anchor, summed. Samples
/// whose class has no anchor contribute nothing.
pub fn loss_proto(
    batch: &LabeledBatch<'_>,
    backbone: &BackboneParams,
    feature: &Dense,
    anchors: &AnchorSet,
) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in batch.iter() {
        if let Some(a) = anchors.get(y) {
            let e = embed(x, backbone, feature)?;
            ensure_len("anchor", e.len(), a.len())?;
            total += squared_distance(&e, a);
        }
    }
    Ok(total)
}

pub fn loss_total(
    batch: &LabeledBatch<'_>,
    backbone: &BackboneParams,
    adapter: &AdapterParams,
    anchors: &AnchorSet,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", "must be nonnegative"));
    }
    let ce = loss_ce(batch, backbone, adapter)?;
    let proto = loss_proto(batch, backbone, &adapter.feature, anchors)?;
    Ok(ce + lambda * proto)
}

/// Gradients of [`loss_total`] with respect to backbone and adapter.
pub fn grad_total(
    batch: &LabeledBatch<'_>,
    backbone: &BackboneParams,
    adapter: &AdapterParams,
    anchors: &AnchorSet,
    lambda: f64,
) -> Result<(BackboneParams, AdapterParams)> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", "must be nonnegative"));
    }
    check_chain(backbone, &adapter.feature)?;
    ensure_len(
        "classifier head input (embed_dim)",
        adapter.feature.out_dim(),
        adapter.head.in_dim(),
    )?;
    let in_dim = backbone.layer.in_dim();
    let hidden = backbone.layer.out_dim();
    let embed_dim = adapter.feature.out_dim();
    let classes = adapter.head.out_dim();

    let mut g_backbone = Dense::zeros(in_dim, hidden);
    let mut g_feature = Dense::zeros(hidden, embed_dim);
    let mut g_head = Dense::zeros(embed_dim, classes);
    let fw = adapter.feature.weight.as_slice();
    let hw = adapter.head.weight.as_slice();

    let mut d_embed = vec![0.0; embed_dim];
    let mut d_hidden = vec![0.0; hidden];
    for (x, y) in batch.iter() {
        let pre = backbone.layer.forward(x, "input (input_dim)")?;
        let mut h = pre.clone();
        relu(&mut h);
        let e = adapter.feature.forward_unchecked(&h);
        let l = adapter.head.forward_unchecked(&e);

        // d loss / d logits = softmax - onehot
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut d_logits: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = d_logits.iter().sum();
        d_logits.iter_mut().for_each(|p| *p /= sum);
        d_logits[y] -= 1.0;

        d_embed.iter_mut().for_each(|v| *v = 0.0);
        let gw = g_head.weight.as_mut_slice();
        for i in 0..embed_dim {
            for j in 0..classes {
                gw[i * classes + j] += e[i] * d_logits[j];
                d_embed[i] += hw[i * classes + j] * d_logits[j];
            }
        }
        for j in 0..classes {
            g_head.bias[j] += d_logits[j];
        }

        if let Some(a) = anchors.get(y) {
            ensure_len("anchor", embed_dim, a.len())?;
            for i in 0..embed_dim {
                d_embed[i] += 2.0 * lambda * (e[i] - a[i]);
            }
        }

        d_hidden.iter_mut().for_each(|v| *v = 0.0);
        let gw = g_feature.weight.as_mut_slice();
        for i in 0..hidden {
            for j in 0..embed_dim {
                gw[i * embed_dim + j] += h[i] * d_embed[j];
                d_hidden[i] += fw[i * embed_dim + j] * d_embed[j];
            }
        }
        for j in 0..embed_dim {
            g_feature.bias[j] += d_embed[j];
        }

        for (d, z) in d_hidden.iter_mut().zip(&pre) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        let gw = g_backbone.weight.as_mut_slice();
        for i in 0..in_dim {
            for j in 0..hidden {
                gw[i * hidden + j] += x[i] * d_hidden[j];
            }
        }
        for j in 0..hidden {
            g_backbone.bias[j] += d_hidden[j];
        }
    }
    Ok((
        BackboneParams { layer: g_backbone },
        AdapterParams {
            feature: g_feature,
            head: g_head,
        },
    ))
}

/// SGD with classic momentum and L2 weight decay folded into the gradient:
/// `v <- mu * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// Returns the updated parameters and momentum buffer.
    pub fn step(&self, params: &[f64], grads: &[f64], velocity: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure_len("gradient", params.len(), grads.len())?;
        ensure_len("momentum buffer", params.len(), velocity.len())?;
        let mut new_params = Vec::with_capacity(params.len());
        let mut new_velocity = Vec::with_capacity(params.len());
        for ((&p, &g), &v) in params.iter().zip(grads).zip(velocity) {
            let v = self.momentum * v + (g + self.weight_decay * p);
            new_velocity.push(v);
            new_params.push(p - self.lr * v);
        }
        Ok((new_params, new_velocity))
    }
}
