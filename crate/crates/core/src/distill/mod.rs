//! Stage 2: train a copy `g` of the frozen stage-1 encoder `f` on ID data,
//! with pairs and force weights chosen in `f`'s embedding space and a
//! similarity-matrix distillation term.

pub mod loss;

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterConfig, ClusterModel};
use crate::encoder::{self, Encoder, Sgd};
use crate::error::{Error, Result};
use crate::knn::{cosine, knn_all};
use crate::rng;
use crate::synthdata::Dataset;

pub use loss::{dl_loss, gcl_loss, gl_loss, GuidedTriple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Positives are drawn from this many nearest neighbours under `f`.
    pub k_kd: usize,
    /// Weight of the distillation loss.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { k_kd: 5, beta: 0.4, epochs: 10, batch_size: 128, lr: 0.005, momentum: 0.9, seed: 0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_kd == 0 {
            return Err(Error::config("k_kd must be positive"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("beta must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("distill batch_size must be at least 2"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("distill lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("distill momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Frozen view of the ID data under the guiding network. Built once.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideIndex {
    pub embeddings: Array2<f64>,
    pub clusters: ClusterModel,
    pub neighbors: Vec<Vec<usize>>,
    /// Pairwise L2 distances between centroids.
    pub centroid_distances: Array2<f64>,
    /// Farthest non-empty cluster from every cluster.
    pub farthest: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl GuideIndex {
    pub fn members(&self, cluster: usize) -> &[usize] {
        &self.members[cluster]
    }
}

/// Farthest cluster by centroid distance, ties to the lower index, skipping
/// empty clusters.
fn farthest_clusters(dist: &Array2<f64>, members: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n_c = dist.nrows();
    (0..n_c)
        .map(|k| {
            let mut others: Vec<usize> = (0..n_c).filter(|&j| j != k).collect();
            others.sort_by(|&a, &b| dist[[k, b]].partial_cmp(&dist[[k, a]]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            others
                .into_iter()
                .find(|&j| !members[j].is_empty())
                .ok_or_else(|| Error::Insufficient(format!("no non-empty cluster other than {k}")))
        })
        .collect()
}

pub fn guide_index_from_embeddings(
    embeddings: Array2<f64>,
    clusters: ClusterModel,
    k_kd: usize,
) -> Result<GuideIndex> {
    let n_c = clusters.n_clusters();
    if n_c < 2 {
        return Err(Error::config("stage 2 needs at least 2 clusters"));
    }
    if k_kd >= embeddings.nrows() {
        return Err(Error::config(format!("k_kd = {k_kd} must be below the ID size {}", embeddings.nrows())));
    }
    let neighbors = knn_all(embeddings.view(), k_kd)?;
    let c = &clusters.centroids;
    let centroid_distances = Array2::from_shape_fn((n_c, n_c), |(a, b)| {
        c.row(a).iter().zip(c.row(b).iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    });
    let members = clusters.members();
    let farthest = farthest_clusters(&centroid_distances, &members)?;
    Ok(GuideIndex { embeddings, clusters, neighbors, centroid_distances, farthest, members })
}

/// Embed the ID data with `f`, cluster once, and index neighbours.
pub fn build_guide_index(f: &Encoder, id: &Dataset, cluster_cfg: &ClusterConfig, k_kd: usize, seed: u64) -> Result<GuideIndex> {
    if cluster_cfg.n_clusters < 2 {
        return Err(Error::config("stage 2 needs at least 2 clusters"));
    }
    let emb = f.embed(id.features_f64().view())?;
    let model = cluster::cluster(emb.view(), cluster_cfg, seed)?;
    guide_index_from_embeddings(emb, model, k_kd)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidePair {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub w_pos: f64,
    pub w_neg: f64,
}

/// Positive uniformly from the anchor's neighbour list, negative uniformly
/// from the farthest cluster; weights are cosines under `f`.
pub fn sample_guide_pair(index: &GuideIndex, anchor: usize, rng: &mut rng::Rng) -> Result<GuidePair> {
    let n = index.embeddings.nrows();
    if anchor >= n {
        return Err(Error::DimensionMismatch { expected: n, got: anchor + 1 });
    }
    let nbrs = &index.neighbors[anchor];
    let positive = nbrs[rng.random_range(0..nbrs.len())];
    let far = index.farthest[index.clusters.assignments[anchor]];
    let pool = &index.members[far];
    let negative = pool[rng.random_range(0..pool.len())];
    let z = &index.embeddings;
    let clamp = |c: f64| c.clamp(-1.0, 1.0);
    Ok(GuidePair {
        anchor,
        positive,
        negative,
        w_pos: clamp(cosine(z.row(anchor), z.row(positive))),
        w_neg: clamp(cosine(z.row(anchor), z.row(negative))),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillLogRow {
    pub epoch: usize,
    pub l_gcl: f64,
    pub l_dl: f64,
    pub l_gl: f64,
}

pub struct DistillOutput {
    pub encoder: Encoder,
    pub log: Vec<DistillLogRow>,
    pub index: GuideIndex,
}

/// Train `g`, initialized as a copy of `f`; `f` is never modified.
pub fn run_distill(f: &Encoder, id: &Dataset, cfg: &DistillConfig, cluster_cfg: &ClusterConfig) -> Result<DistillOutput> {
    cfg.validate()?;
    cluster_cfg.validate()?;
    if id.len() < 2 {
        return Err(Error::Insufficient("stage 2 needs at least 2 ID samples".into()));
    }
    let index = build_guide_index(f, id, cluster_cfg, cfg.k_kd, rng::derive_seed(cfg.seed, rng::CLUSTERING))?;
    let mut g = f.clone();
    let mut opt = Sgd::new(&g.params, cfg.lr, cfg.momentum)?;
    let x = id.features_f64();
    let mut order_rng = rng::stream(cfg.seed, rng::BATCHING);
    let mut pair_rng = rng::stream(cfg.seed, rng::GUIDE_SAMPLING);
    let mut order: Vec<usize> = (0..id.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut s_gcl, mut s_dl, mut s_gl, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let pairs = chunk
                .iter()
                .map(|&i| sample_guide_pair(&index, i, &mut pair_rng))
                .collect::<Result<Vec<_>>>()?;
            let mut rows_idx: Vec<usize> = chunk.to_vec();
            rows_idx.extend(pairs.iter().map(|p| p.positive));
            rows_idx.extend(pairs.iter().map(|p| p.negative));
            let rows = x.select(Axis(0), &rows_idx);
            let cache = encoder::forward_cached(&g.config, &g.params, rows.view())?;
            let emb = cache.embeddings();
            let triples: Vec<GuidedTriple> = pairs
                .iter()
                .enumerate()
                .map(|(r, p)| GuidedTriple { anchor: r, positive: b + r, negative: 2 * b + r, w_pos: p.w_pos, w_neg: p.w_neg })
                .collect();
            let gcl = gcl_loss(emb.view(), &triples)?;
            let z_f = index.embeddings.select(Axis(0), chunk);
            let dl_small = dl_loss(z_f.view(), emb.slice(ndarray::s![0..b, ..]))?;
            let mut dl = crate::pretrain::LossOutput { value: dl_small.value, adjoint: Array2::zeros(emb.raw_dim()) };
            dl.adjoint.slice_mut(ndarray::s![0..b, ..]).assign(&dl_small.adjoint);
            let total = gl_loss(&gcl, &dl, cfg.beta);
            if !total.value.is_finite() {
                return Err(Error::Numeric(format!("stage-2 loss is {}", total.value)));
            }
            let grads = encoder::backward(&g.config, &g.params, &cache, total.adjoint.view())?;
            opt.step(&mut g.params, &grads)?;
            s_gcl += gcl.value;
            s_dl += dl.value;
            s_gl += total.value;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        log.push(DistillLogRow { epoch, l_gcl: s_gcl / s, l_dl: s_dl / s, l_gl: s_gl / s });
    }
    Ok(DistillOutput { encoder: g, log, index })
}

/// CSV with columns `epoch,L_GCL,L_DL,L_GL`.
pub fn write_distill_log(path: impl AsRef<Path>, log: &[DistillLogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,L_GCL,L_DL,L_GL\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.l_gcl, r.l_dl, r.l_gl));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
