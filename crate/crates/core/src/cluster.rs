//! KL-divergence clustering of embeddings: k-means++ / Lloyd initialization,
//! Student's-t soft assignment, sharpened target distribution, and minibatch
//! gradient refinement of the centroids.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Degrees of freedom of the Student's-t kernel.
pub const DEGREES_OF_FREEDOM: f64 = 1.0;

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// `n_clusters × embed_dim`.
    pub centroids: Array2<f64>,
    /// Cluster of every instance, L2-nearest centroid, ties to the lower index.
    pub assignments: Vec<usize>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.nrows()
    }

    /// Instance indices of every cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (i, &k) in self.assignments.iter().enumerate() {
            out[k].push(i);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment {
    /// `n × n_clusters`, rows sum to one.
    pub q: Array2<f64>,
    pub dof: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub n_clusters: usize,
    /// Refinement stops once fewer than this fraction of hard assignments
    /// change between consecutive epochs. A value of 1 disables refinement.
    pub change_threshold: f64,
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { n_clusters: 10, change_threshold: 0.001, max_epochs: 100, lr: 0.1, batch_size: 256 }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::config("n_clusters must be positive"));
        }
        if !(self.change_threshold > 0.0 && self.change_threshold <= 1.0) {
            return Err(Error::config("change_threshold must lie in (0, 1]"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("cluster lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("cluster batch_size must be positive"));
        }
        Ok(())
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(z: ArrayView1<'_, f64>, centroids: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.axis_iter(Axis(0)).enumerate() {
        let d = sq_dist(z, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// L2-nearest centroid per row; ties go to the lowest cluster index.
pub fn hard_assign(emb: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> Vec<usize> {
    emb.axis_iter(Axis(0)).map(|z| nearest(z, centroids).0).collect()
}

/// k-means++ seeding followed by Lloyd iterations (at most 100, or until the
/// assignment stops changing).
pub fn kmeans_init(emb: ArrayView2<'_, f64>, n_clusters: usize, seed: u64) -> Result<Array2<f64>> {
    let n = emb.nrows();
    if n_clusters == 0 {
        return Err(Error::config("n_clusters must be positive"));
    }
    if n < n_clusters {
        return Err(Error::Insufficient(format!("{n} points cannot form {n_clusters} clusters")));
    }
    let mut rng = rng::from_seed(seed);
    let mut chosen = Vec::with_capacity(n_clusters);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = emb.axis_iter(Axis(0)).map(|z| sq_dist(z, emb.row(chosen[0]))).collect();
    while chosen.len() < n_clusters {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every remaining point coincides with a chosen one.
            (0..n).find(|i| !chosen.contains(i)).expect("n >= n_clusters")
        };
        chosen.push(next);
        for (i, z) in emb.axis_iter(Axis(0)).enumerate() {
            d2[i] = d2[i].min(sq_dist(z, emb.row(next)));
        }
    }

    let mut centroids = emb.select(Axis(0), &chosen);
    let mut assign = hard_assign(emb, centroids.view());
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; n_clusters];
        for (z, &k) in emb.axis_iter(Axis(0)).zip(&assign) {
            let mut row = sums.row_mut(k);
            row += &z;
            counts[k] += 1;
        }
        for k in 0..n_clusters {
            // An emptied cluster keeps its previous centroid.
            if counts[k] > 0 {
                centroids.row_mut(k).assign(&(&sums.row(k) / counts[k] as f64));
            }
        }
        let next = hard_assign(emb, centroids.view());
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(centroids)
}

/// Student's-t kernel `(1 + |z - mu|^2 / dof)^(-(dof + 1) / 2)`, row-normalized.
pub fn soft_assign_with_dof(emb: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>, dof: f64) -> SoftAssignment {
    let exponent = -(dof + 1.0) / 2.0;
    let mut q = Array2::<f64>::zeros((emb.nrows(), centroids.nrows()));
    for (z, mut row) in emb.axis_iter(Axis(0)).zip(q.axis_iter_mut(Axis(0))) {
        for (k, c) in centroids.axis_iter(Axis(0)).enumerate() {
            row[k] = (1.0 + sq_dist(z, c) / dof).powf(exponent);
        }
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    SoftAssignment { q, dof }
}

pub fn soft_assign(emb: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> SoftAssignment {
    soft_assign_with_dof(emb, centroids, DEGREES_OF_FREEDOM)
}

/// `p_ik ∝ q_ik^2 / h_k` with `h_k = Σ_i q_ik` over the rows of `q`.
pub fn target_dist(q: ArrayView2<'_, f64>) -> Array2<f64> {
    let h = q.sum_axis(Axis(0));
    let mut p = q.to_owned();
    for mut row in p.axis_iter_mut(Axis(0)) {
        for (v, hk) in row.iter_mut().zip(h.iter()) {
            *v = *v * *v / hk;
        }
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Mean over rows of `KL(p_i || q_i)`, with `0 log 0 = 0`.
pub fn kl_cluster_loss(p: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> f64 {
    let b = p.nrows().max(1) as f64;
    p.iter()
        .zip(q.iter())
        .map(|(&pv, &qv)| if pv > 0.0 { pv * (pv / qv).ln() } else { 0.0 })
        .sum::<f64>()
        / b
}

/// Gradient of `kl_cluster_loss(p, q(centroids))` with respect to the
/// centroids, `p` held fixed.
pub fn kl_centroid_grad(
    emb: ArrayView2<'_, f64>,
    centroids: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    soft: &SoftAssignment,
) -> Array2<f64> {
    let dof = soft.dof;
    let b = emb.nrows() as f64;
    let mut g = Array2::<f64>::zeros(centroids.raw_dim());
    for (i, z) in emb.axis_iter(Axis(0)).enumerate() {
        for (k, c) in centroids.axis_iter(Axis(0)).enumerate() {
            let coef = -(dof + 1.0) / dof * (p[[i, k]] - soft.q[[i, k]]) / (1.0 + sq_dist(z, c) / dof) / b;
            let mut gk = g.row_mut(k);
            gk.scaled_add(coef, &(&z - &c));
        }
    }
    g
}

/// Refine `init_centroids` by minibatch gradient descent on the KL loss,
/// recomputing the target distribution per minibatch. Returns the model and
/// the mean loss of every epoch run.
pub fn refine_traced(
    emb: ArrayView2<'_, f64>,
    init_centroids: ArrayView2<'_, f64>,
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<(ClusterModel, Vec<f64>)> {
    cfg.validate()?;
    if init_centroids.ncols() != emb.ncols() {
        return Err(Error::DimensionMismatch { expected: emb.ncols(), got: init_centroids.ncols() });
    }
    let n = emb.nrows();
    let mut centroids = init_centroids.to_owned();
    let mut assign = hard_assign(emb, centroids.view());
    let mut history = Vec::new();
    if cfg.change_threshold >= 1.0 || n == 0 {
        return Ok((ClusterModel { centroids, assignments: assign }, history));
    }
    let mut rng = rng::from_seed(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = emb.select(Axis(0), chunk);
            let soft = soft_assign(batch.view(), centroids.view());
            let p = target_dist(soft.q.view());
            let loss = kl_cluster_loss(p.view(), soft.q.view());
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("cluster loss is {loss} in epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            let g = kl_centroid_grad(batch.view(), centroids.view(), p.view(), &soft);
            centroids.scaled_add(-cfg.lr, &g);
        }
        history.push(total / n as f64);
        let next = hard_assign(emb, centroids.view());
        let changed = next.iter().zip(&assign).filter(|(a, b)| a != b).count();
        assign = next;
        if (changed as f64) / (n as f64) < cfg.change_threshold {
            break;
        }
    }
    if !centroids.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite centroid".into()));
    }
    Ok((ClusterModel { centroids, assignments: assign }, history))
}

pub fn refine(
    emb: ArrayView2<'_, f64>,
    init_centroids: ArrayView2<'_, f64>,
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<ClusterModel> {
    refine_traced(emb, init_centroids, cfg, seed).map(|(m, _)| m)
}

/// k-means initialization followed by KL refinement.
pub fn cluster(emb: ArrayView2<'_, f64>, cfg: &ClusterConfig, seed: u64) -> Result<ClusterModel> {
    cfg.validate()?;
    let init = kmeans_init(emb, cfg.n_clusters, seed)?;
    refine(emb, init.view(), cfg, seed.wrapping_add(1))
}
