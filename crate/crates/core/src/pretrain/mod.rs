//! Stage 1: contrastive pretraining on ID data merged with tail-targeted OOD
//! samples.
//!
//! Every `refresh_period` epochs the loop embeds the ID set, clusters it,
//! rescores tailness, reallocates the OOD budget, resamples the OOD subset and
//! rebuilds the per-domain neighbour index. Between refreshes it runs
//! minibatch SGD on `psd + alpha * dd`.

pub mod loss;

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterConfig};
use crate::encoder::{self, Encoder, EncoderConfig, Sgd};
use crate::error::{Error, Result};
use crate::knn::knn_within;
use crate::rng;
use crate::synthdata::{Dataset, Domain};
use crate::tailness::{self, TailnessConfig, TailnessState};

pub use loss::{cpt_loss, dd_loss, psd_loss, LossOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Same-domain nearest neighbours used as extra positives.
    pub k_pos: usize,
    /// Weight of the domain discrimination loss.
    pub alpha: f64,
    pub tau: f64,
    /// Epochs between refreshes of clusters, OOD subset and neighbours.
    pub refresh_period: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub jitter_sigma: f64,
    pub dropout_rate: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            k_pos: 3,
            alpha: 0.3,
            tau: 0.2,
            refresh_period: 25,
            batch_size: 128,
            epochs: 100,
            lr: 0.05,
            momentum: 0.9,
            jitter_sigma: 0.1,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha must be >= 0"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau must be positive"));
        }
        if self.refresh_period == 0 {
            return Err(Error::config("refresh_period must be positive"));
        }
        if self.batch_size < self.k_pos + 2 {
            return Err(Error::config(format!(
                "batch_size {} leaves no negatives with k_pos = {}",
                self.batch_size, self.k_pos
            )));
        }
        if self.alpha > 0.0 && self.batch_size < 4 {
            return Err(Error::config("domain loss needs batch_size >= 4 (two samples per domain)"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("pretrain lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("pretrain momentum must lie in [0, 1)"));
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::config("jitter_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Additive Gaussian jitter followed by random coordinate dropout.
pub fn augment(x: ArrayView1<'_, f64>, jitter_sigma: f64, dropout_rate: f64, rng: &mut rng::Rng) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let jittered = if jitter_sigma > 0.0 { v + jitter_sigma * rng.sample::<f64, _>(StandardNormal) } else { v };
            if dropout_rate > 0.0 && rng.random::<f64>() < dropout_rate {
                0.0
            } else {
                jittered
            }
        })
        .collect()
}

/// Per-instance same-domain neighbours over the merged dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    pub neighbors: Vec<Vec<usize>>,
}

/// Exact cosine `k_pos`-NN of every instance among instances of its own
/// domain; ties go to the lower index.
pub fn build_neighbor_index(emb: &Array2<f64>, domains: &[Domain], k_pos: usize) -> Result<NeighborIndex> {
    if domains.len() != emb.nrows() {
        return Err(Error::DimensionMismatch { expected: emb.nrows(), got: domains.len() });
    }
    let mut neighbors = vec![Vec::new(); emb.nrows()];
    if k_pos == 0 {
        return Ok(NeighborIndex { neighbors });
    }
    for dom in [Domain::Id, Domain::Ood] {
        let members: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == dom).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() <= k_pos {
            return Err(Error::Insufficient(format!(
                "{dom:?} domain has {} instances, needs more than k_pos = {k_pos}",
                members.len()
            )));
        }
        for (m, nn) in members.iter().zip(knn_within(emb.view(), &members, k_pos)?) {
            neighbors[*m] = nn;
        }
    }
    Ok(NeighborIndex { neighbors })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLogRow {
    pub epoch: usize,
    pub l_psd: f64,
    pub l_dd: f64,
    pub l_cpt: f64,
    pub n_ood_sampled: usize,
}

pub struct PretrainOutput {
    pub encoder: Encoder,
    pub velocity: encoder::EncoderParams,
    pub log: Vec<PretrainLogRow>,
    /// Epochs at which the refresh ran.
    pub refresh_epochs: Vec<usize>,
    /// OOD pool indices of the last sampled subset.
    pub ood_selected: Vec<usize>,
}

/// Everything stage 1 needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOneConfig {
    pub encoder: EncoderConfig,
    pub cluster: ClusterConfig,
    pub tailness: TailnessConfig,
    pub pretrain: PretrainConfig,
}

/// Merged training set at one refresh.
struct Merged {
    features: Array2<f64>,
    domains: Vec<Domain>,
    neighbors: NeighborIndex,
    ood_selected: Vec<usize>,
}

fn refresh(
    enc: &Encoder,
    id_x: &Array2<f64>,
    ood_x: Option<&Array2<f64>>,
    cfg: &StageOneConfig,
    state: &mut TailnessState,
    epoch: usize,
) -> Result<Merged> {
    let z_id = enc.embed(id_x.view())?;
    let mut selected = Vec::new();
    let mut z_ood_sel = None;
    if let Some(ood_x) = ood_x {
        let budget = cfg.tailness.budget_for_pool(ood_x.nrows());
        if budget > 0 {
            let clu_seed = rng::derive_seed(cfg.pretrain.seed, &format!("{}-{epoch}", rng::CLUSTERING));
            let model = cluster::cluster(z_id.view(), &cfg.cluster, clu_seed)?;
            let raw = tailness::instance_tailness(z_id.view(), cfg.tailness.k)?;
            state.momentum_update(raw, epoch)?;
            let s_tail = tailness::cluster_tailness(&state.scores, &model)?;
            let alloc = tailness::allocate_budget(&s_tail, budget, cfg.tailness.tau_budget)?;
            let z_ood = enc.embed(ood_x.view())?;
            selected = tailness::sample_ood(z_ood.view(), model.centroids.view(), &alloc)?
                .into_iter()
                .flatten()
                .collect();
            selected.sort_unstable();
            z_ood_sel = Some((z_ood.select(Axis(0), &selected), ood_x.select(Axis(0), &selected)));
        }
    }
    let n_id = id_x.nrows();
    let mut domains = vec![Domain::Id; n_id];
    domains.extend(std::iter::repeat_n(Domain::Ood, selected.len()));
    let (features, embeddings) = match z_ood_sel {
        Some((z, x)) => (
            ndarray::concatenate(Axis(0), &[id_x.view(), x.view()]).expect("same width"),
            ndarray::concatenate(Axis(0), &[z_id.view(), z.view()]).expect("same width"),
        ),
        None => (id_x.clone(), z_id),
    };
    let neighbors = build_neighbor_index(&embeddings, &domains, cfg.pretrain.k_pos)?;
    Ok(Merged { features, domains, neighbors, ood_selected: selected })
}

/// Minibatch of merged indices. With both domains present the batch is
/// stratified proportionally with at least two samples per domain.
fn sample_batch(merged: &Merged, batch: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let n = merged.domains.len();
    let n_ood = merged.domains.iter().filter(|d| **d == Domain::Ood).count();
    let n_id = n - n_ood;
    let b = batch.min(n);
    if n_ood == 0 {
        return index::sample(rng, n, b).into_vec();
    }
    let b_ood = ((b as f64 * n_ood as f64 / n as f64).round() as usize)
        .max(2)
        .min(b - 2)
        .min(n_ood);
    let b_id = (b - b_ood).min(n_id);
    let mut out: Vec<usize> = index::sample(rng, n_id, b_id).into_iter().collect();
    out.extend(index::sample(rng, n_ood, b_ood).into_iter().map(|j| n_id + j));
    out
}

pub fn run_pretrain(id: &Dataset, ood: Option<&Dataset>, cfg: &StageOneConfig) -> Result<PretrainOutput> {
    run_pretrain_with_hook(id, ood, cfg, &mut |_, _| Ok(()))
}

/// As `run_pretrain`; `hook(epochs_done, encoder)` runs after every
/// `refresh_period` completed epochs.
pub fn run_pretrain_with_hook(
    id: &Dataset,
    ood: Option<&Dataset>,
    cfg: &StageOneConfig,
    hook: &mut dyn FnMut(usize, &Encoder) -> Result<()>,
) -> Result<PretrainOutput> {
    cfg.encoder.validate()?;
    cfg.cluster.validate()?;
    cfg.tailness.validate()?;
    let pc = &cfg.pretrain;
    pc.validate()?;
    if id.dim() != cfg.encoder.input_dim {
        return Err(Error::DimensionMismatch { expected: cfg.encoder.input_dim, got: id.dim() });
    }
    if id.domains().iter().any(|d| *d != Domain::Id) {
        return Err(Error::config("ID dataset contains OOD-tagged samples"));
    }
    if let Some(o) = ood {
        if o.dim() != id.dim() {
            return Err(Error::DimensionMismatch { expected: id.dim(), got: o.dim() });
        }
    }
    let ood_budget = ood.map_or(0, |o| cfg.tailness.budget_for_pool(o.len()));
    if pc.alpha > 0.0 && ood_budget < 2 {
        return Err(Error::config("alpha > 0 needs an OOD pool with a budget of at least 2"));
    }
    if pc.epochs > 0 && id.len() < pc.k_pos + 2 {
        return Err(Error::Insufficient(format!("{} ID samples is too few for k_pos = {}", id.len(), pc.k_pos)));
    }

    let mut enc = Encoder::new(cfg.encoder.clone())?;
    let mut opt = Sgd::new(&enc.params, pc.lr, pc.momentum)?;
    let mut state = TailnessState::new(cfg.tailness.rho, pc.refresh_period)?;
    let id_x = id.features_f64();
    let ood_x = ood.map(Dataset::features_f64);
    let mut batch_rng = rng::stream(pc.seed, rng::BATCHING);
    let mut aug_rng = rng::stream(pc.seed, rng::AUGMENTATION);

    let mut log = Vec::with_capacity(pc.epochs);
    let mut refresh_epochs = Vec::new();
    let mut merged: Option<Merged> = None;
    let steps_per_epoch = |n: usize| n.div_ceil(pc.batch_size.min(n)).max(1);

    for epoch in 0..pc.epochs {
        if epoch % pc.refresh_period == 0 {
            merged = Some(refresh(&enc, &id_x, ood_x.as_ref(), cfg, &mut state, epoch)?);
            refresh_epochs.push(epoch);
        }
        let m = merged.as_ref().expect("refreshed at epoch 0");
        let (mut sum_psd, mut sum_dd, mut sum_cpt) = (0.0, 0.0, 0.0);
        let steps = steps_per_epoch(m.domains.len());
        for _ in 0..steps {
            let batch = sample_batch(m, pc.batch_size, &mut batch_rng);
            let (psd, dd) = train_step(&mut enc, &mut opt, m, &batch, pc, &mut aug_rng)?;
            sum_psd += psd;
            sum_dd += dd;
            sum_cpt += psd + pc.alpha * dd;
        }
        let s = steps as f64;
        log.push(PretrainLogRow {
            epoch,
            l_psd: sum_psd / s,
            l_dd: sum_dd / s,
            l_cpt: sum_cpt / s,
            n_ood_sampled: m.ood_selected.len(),
        });
        if (epoch + 1) % pc.refresh_period == 0 {
            hook(epoch + 1, &enc)?;
        }
    }
    let ood_selected = merged.map(|m| m.ood_selected).unwrap_or_default();
    Ok(PretrainOutput { encoder: enc, velocity: opt.velocity, log, refresh_epochs, ood_selected })
}

/// One SGD step; returns `(L_PSD, L_DD)` of the batch.
fn train_step(
    enc: &mut Encoder,
    opt: &mut Sgd,
    m: &Merged,
    batch: &[usize],
    pc: &PretrainConfig,
    aug_rng: &mut rng::Rng,
) -> Result<(f64, f64)> {
    let b = batch.len();
    let k = pc.k_pos;
    let d = m.features.ncols();
    // Rows: [view 1 of every anchor | view 2 of every anchor | neighbours].
    let mut rows = Array2::<f64>::zeros((b * (2 + k), d));
    for (r, &i) in batch.iter().enumerate() {
        let x = m.features.row(i);
        rows.row_mut(r).assign(&ArrayView1::from(&augment(x, pc.jitter_sigma, pc.dropout_rate, aug_rng)[..]));
        rows.row_mut(b + r).assign(&ArrayView1::from(&augment(x, pc.jitter_sigma, pc.dropout_rate, aug_rng)[..]));
        for (q, &nb) in m.neighbors.neighbors[i].iter().enumerate() {
            rows.row_mut(2 * b + r * k + q).assign(&m.features.row(nb));
        }
    }
    let cache = encoder::forward_cached(&enc.config, &enc.params, rows.view())?;
    let emb = cache.embeddings();

    let anchors: Vec<usize> = (0..b).collect();
    let mut positives = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b);
    for (r, &i) in batch.iter().enumerate() {
        let mut pos = vec![b + r];
        pos.extend((0..k).map(|q| 2 * b + r * k + q));
        positives.push(pos);
        let nbrs = &m.neighbors.neighbors[i];
        negatives.push(
            (0..b)
                .filter(|&c| c != r && batch[c] != i && !nbrs.contains(&batch[c]))
                .collect::<Vec<_>>(),
        );
    }
    let psd = psd_loss(emb.view(), &anchors, &positives, &negatives, pc.tau)?;
    let mut total = psd.clone();
    let mut dd_value = 0.0;
    if pc.alpha > 0.0 {
        let mut same = Vec::with_capacity(b);
        let mut diff = Vec::with_capacity(b);
        for r in 0..b {
            let dom = m.domains[batch[r]];
            same.push((0..b).filter(|&c| c != r && m.domains[batch[c]] == dom).collect::<Vec<_>>());
            diff.push((0..b).filter(|&c| m.domains[batch[c]] != dom).collect::<Vec<_>>());
        }
        let dd = dd_loss(emb.view(), &anchors, &same, &diff, pc.tau)?;
        dd_value = dd.value;
        total = cpt_loss(&psd, &dd, pc.alpha);
    }
    if !total.value.is_finite() {
        return Err(Error::Numeric(format!("stage-1 loss is {}", total.value)));
    }
    let grads = encoder::backward(&enc.config, &enc.params, &cache, total.adjoint.view())?;
    opt.step(&mut enc.params, &grads)?;
    Ok((psd.value, dd_value))
}

/// CSV with columns `epoch,L_PSD,L_DD,L_CPT,n_ood_sampled`.
pub fn write_pretrain_log(path: impl AsRef<Path>, log: &[PretrainLogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,L_PSD,L_DD,L_CPT,n_ood_sampled\n");
    for r in log {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.l_psd, r.l_dd, r.l_cpt, r.n_ood_sampled));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
