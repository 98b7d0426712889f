//! Instance and cluster tailness scores, softmax budget allocation with
//! largest-remainder integerization, and nearest-to-centroid OOD selection.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::knn::{knn_all, normalize_rows};

const STD_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailnessConfig {
    /// Neighbours per instance in the density estimate.
    pub k: usize,
    /// Momentum of the smoothed score.
    pub rho: f64,
    /// Total OOD sampling budget; `None` means 20% of the OOD pool.
    pub n_budget: Option<usize>,
    pub tau_budget: f64,
}

impl Default for TailnessConfig {
    fn default() -> Self {
        Self { k: 10, rho: 0.9, n_budget: None, tau_budget: 1.0 }
    }
}

impl TailnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("tailness k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        if !(self.tau_budget > 0.0) || !self.tau_budget.is_finite() {
            return Err(Error::config("tau_budget must be positive"));
        }
        Ok(())
    }

    pub fn budget_for_pool(&self, pool: usize) -> usize {
        self.n_budget.unwrap_or(pool / 5)
    }
}

/// Raw tailness of every instance: the negated mean of `exp(cos)` over all
/// ordered pairs in the set formed by the instance and its `k` cosine nearest
/// neighbours. Sparser neighbourhoods score higher.
pub fn instance_tailness(emb: ArrayView2<'_, f64>, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::config("tailness k must be positive"));
    }
    if emb.nrows() <= k {
        return Err(Error::Insufficient(format!(
            "tailness needs more than k = {k} instances, got {}",
            emb.nrows()
        )));
    }
    let neighbours = knn_all(emb, k)?;
    let unit = normalize_rows(emb);
    let denom = (k * (k + 1)) as f64;
    Ok(neighbours
        .par_iter()
        .enumerate()
        .map(|(i, nn)| {
            let mut set = Vec::with_capacity(k + 1);
            set.push(i);
            set.extend_from_slice(nn);
            let mut total = 0.0;
            for (a, &m) in set.iter().enumerate() {
                for &n in &set[a + 1..] {
                    // cos is symmetric: each unordered pair counts twice.
                    total += 2.0 * unit.row(m).dot(&unit.row(n)).exp();
                }
            }
            -total / denom
        })
        .collect())
}

/// Momentum-smoothed tailness of every ID instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TailnessState {
    pub scores: Vec<f64>,
    pub raw_scores: Vec<f64>,
    pub last_update_epoch: Option<usize>,
    pub rho: f64,
    /// Epochs between updates.
    pub period: usize,
}

impl TailnessState {
    pub fn new(rho: f64, period: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        if period == 0 {
            return Err(Error::config("update period must be positive"));
        }
        Ok(Self { scores: Vec::new(), raw_scores: Vec::new(), last_update_epoch: None, rho, period })
    }

    /// `s^t = rho * s^(t - T) + (1 - rho) * raw^t`; at `t = 0`, `s^0 = raw^0`.
    pub fn momentum_update(&mut self, raw: Vec<f64>, epoch: usize) -> Result<()> {
        match self.last_update_epoch {
            None if epoch == 0 => {
                self.scores = raw.clone();
            }
            Some(last) if epoch == last + self.period => {
                if raw.len() != self.scores.len() {
                    return Err(Error::DimensionMismatch { expected: self.scores.len(), got: raw.len() });
                }
                for (s, r) in self.scores.iter_mut().zip(&raw) {
                    *s = self.rho * *s + (1.0 - self.rho) * r;
                }
            }
            _ => {
                return Err(Error::config(format!(
                    "out-of-order tailness update at epoch {epoch} (last {:?}, period {})",
                    self.last_update_epoch, self.period
                )))
            }
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite tailness score".into()));
        }
        self.raw_scores = raw;
        self.last_update_epoch = Some(epoch);
        Ok(())
    }
}

/// Mean instance score per cluster. An empty cluster gets the mean of all
/// instance scores.
pub fn cluster_tailness(scores: &[f64], model: &ClusterModel) -> Result<Vec<f64>> {
    if scores.len() != model.assignments.len() {
        return Err(Error::DimensionMismatch { expected: model.assignments.len(), got: scores.len() });
    }
    let n_c = model.n_clusters();
    let mut sums = vec![0.0; n_c];
    let mut counts = vec![0usize; n_c];
    for (&s, &k) in scores.iter().zip(&model.assignments) {
        if k >= n_c {
            return Err(Error::Format(format!("assignment {k} outside {n_c} clusters")));
        }
        sums[k] += s;
        counts[k] += 1;
    }
    let global = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { global } else { s / c as f64 })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetAllocation {
    /// Integer budget of every cluster; sums to `total`.
    pub budgets: Vec<usize>,
    pub total: usize,
    pub tau: f64,
    /// Cluster tailness scores the budgets were derived from.
    pub scores: Vec<f64>,
}

/// Standardize the scores, take `softmax(ŝ / tau)`, scale by `total` and
/// round with the largest-remainder method.
pub fn allocate_budget(cluster_scores: &[f64], total: usize, tau: f64) -> Result<BudgetAllocation> {
    if cluster_scores.is_empty() {
        return Err(Error::config("need at least one cluster"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config("tau_budget must be positive"));
    }
    if cluster_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite cluster tailness".into()));
    }
    let n = cluster_scores.len() as f64;
    let mean = cluster_scores.iter().sum::<f64>() / n;
    let std = (cluster_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let logits: Vec<f64> = if std < STD_EPS {
        vec![0.0; cluster_scores.len()]
    } else {
        cluster_scores.iter().map(|s| (s - mean) / std / tau).collect()
    };
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let quotas: Vec<f64> = exps.iter().map(|e| total as f64 * e / z).collect();
    let budgets = largest_remainder(&quotas, total, cluster_scores);
    Ok(BudgetAllocation { budgets, total, tau, scores: cluster_scores.to_vec() })
}

/// Floor every quota, then hand the leftover units to the largest fractional
/// parts. Equal remainders go to the higher score, then the lower index.
pub fn largest_remainder(quotas: &[f64], total: usize, priority: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor().max(0.0) as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .partial_cmp(&(quotas[a] - quotas[a].floor()))
            .unwrap_or(Ordering::Equal)
            .then(priority[b].partial_cmp(&priority[a]).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    // Floors never exceed the exact quotas, so this is below the cluster count.
    let leftover = total.saturating_sub(assigned);
    for i in order.iter().cycle().take(leftover) {
        out[*i] += 1;
    }
    out
}

/// For every cluster, the `budget` OOD samples L2-nearest to its centroid.
/// Clusters pick in descending tailness (ties to the lower index) and each
/// OOD sample is used at most once. The result is indexed by cluster.
pub fn sample_ood(
    ood_emb: ArrayView2<'_, f64>,
    centroids: ArrayView2<'_, f64>,
    alloc: &BudgetAllocation,
) -> Result<Vec<Vec<usize>>> {
    let n_c = centroids.nrows();
    if alloc.budgets.len() != n_c {
        return Err(Error::DimensionMismatch { expected: n_c, got: alloc.budgets.len() });
    }
    if ood_emb.ncols() != centroids.ncols() {
        return Err(Error::DimensionMismatch { expected: centroids.ncols(), got: ood_emb.ncols() });
    }
    let need: usize = alloc.budgets.iter().sum();
    if need > ood_emb.nrows() {
        return Err(Error::Insufficient(format!(
            "OOD pool of {} cannot cover a budget of {need}",
            ood_emb.nrows()
        )));
    }
    let mut cluster_order: Vec<usize> = (0..n_c).collect();
    cluster_order.sort_by(|&a, &b| {
        alloc.scores[b]
            .partial_cmp(&alloc.scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut used = vec![false; ood_emb.nrows()];
    let mut selected = vec![Vec::new(); n_c];
    for k in cluster_order {
        let budget = alloc.budgets[k];
        if budget == 0 {
            continue;
        }
        let mu = centroids.row(k);
        let mut cand: Vec<(f64, usize)> = ood_emb
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, z)| (z.iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum(), j))
            .collect();
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
        if budget < cand.len() {
            cand.select_nth_unstable_by(budget, by_dist);
            cand.truncate(budget);
        }
        cand.sort_by(by_dist);
        for (_, j) in cand {
            used[j] = true;
            selected[k].push(j);
        }
    }
    Ok(selected)
}

/// CSV dump with columns `index,score,cluster,budget`, one row per ID
/// instance; `budget` is the budget of the instance's cluster.
pub fn write_tailness_csv(
    path: impl AsRef<Path>,
    scores: &[f64],
    model: &ClusterModel,
    alloc: &BudgetAllocation,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("index,score,cluster,budget\n");
    for (i, (&s, &k)) in scores.iter().zip(&model.assignments).enumerate() {
        out.push_str(&format!("{i},{s},{k},{}\n", alloc.budgets[k]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
