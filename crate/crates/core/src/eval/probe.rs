//! Multinomial logistic-regression probe on frozen embeddings.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng;
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub label_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { label_fraction: 1.0, epochs: 30, lr: 2.0, momentum: 0.9, batch_size: 64, seed: 0 }
    }
}

impl ProbeConfig {
    /// 1% of the labels, trained longer.
    pub fn few_shot() -> Self {
        Self { label_fraction: 0.01, epochs: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config(format!("label_fraction must be in (0, 1], got {}", self.label_fraction)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("probe lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("probe momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("probe batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    /// `embed_dim × n_classes`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ProbeModel {
    pub fn zeros(embed_dim: usize, n_classes: usize) -> Self {
        Self { weight: Array2::zeros((embed_dim, n_classes)), bias: Array1::zeros(n_classes) }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, emb: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if emb.ncols() != self.weight.nrows() {
            return Err(Error::DimensionMismatch { expected: self.weight.nrows(), got: emb.ncols() });
        }
        Ok(emb.dot(&self.weight) + &self.bias)
    }

    /// Argmax class per row; ties go to the lower class index.
    pub fn predict(&self, emb: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let logits = self.logits(emb)?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Indices of the labeled subset used for training.
fn subsample(labels: &[usize], n_classes: usize, fraction: f64, rng: &mut rng::Rng) -> Result<Vec<usize>> {
    let n = labels.len();
    if fraction >= 1.0 {
        return Ok((0..n).collect());
    }
    let m = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx = index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    let mut seen = vec![false; n_classes];
    for &i in &idx {
        seen[labels[i]] = true;
    }
    if seen.iter().all(|&s| s) {
        return Ok(idx);
    }
    // Stratified retry: the same fraction within each class, at least one each.
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut idx = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::Insufficient(format!("class {c} has no labeled training samples")));
        }
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        members.shuffle(rng);
        idx.extend_from_slice(&members[..take]);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Train on precomputed embeddings with labels in `0..n_classes`.
pub fn train_probe_on_embeddings(
    emb: ArrayView2<'_, f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    cfg.validate()?;
    if emb.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: emb.nrows(), got: labels.len() });
    }
    if n_classes < 2 {
        return Err(Error::config(format!("probe needs at least 2 classes, got {n_classes}")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Format(format!("label {bad} outside {n_classes} classes")));
    }
    let mut rng = rng::from_seed(cfg.seed);
    let mut order = subsample(labels, n_classes, cfg.label_fraction, &mut rng)?;

    let d = emb.ncols();
    let mut model = ProbeModel::zeros(d, n_classes);
    let mut vw = Array2::<f64>::zeros((d, n_classes));
    let mut vb = Array1::<f64>::zeros(n_classes);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = emb.select(Axis(0), chunk);
            let mut p = model.logits(x.view())?;
            softmax_rows(&mut p);
            for (r, &i) in chunk.iter().enumerate() {
                p[[r, labels[i]]] -= 1.0;
            }
            p /= chunk.len() as f64;
            let gw = x.t().dot(&p);
            let gb = p.sum_axis(Axis(0));
            vw = vw * cfg.momentum + gw;
            vb = vb * cfg.momentum + gb;
            model.weight.scaled_add(-cfg.lr, &vw);
            model.bias.scaled_add(-cfg.lr, &vb);
        }
        if !model.is_finite() {
            return Err(Error::Numeric("probe parameters became non-finite".into()));
        }
    }
    Ok(model)
}

/// Embed the labeled training set with the frozen encoder, then fit the probe.
pub fn train_probe(encoder: &Encoder, train: &Dataset, n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeModel> {
    let labels = train.require_labels()?;
    let emb = encoder.embed(train.features_f64().view())?;
    train_probe_on_embeddings(emb.view(), &labels, n_classes, cfg)
}

/// Fraction of rows whose prediction matches the label.
pub fn accuracy(model: &ProbeModel, emb: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let preds = model.predict(emb)?;
    Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64)
}
