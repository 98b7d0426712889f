//! Exact k-nearest-neighbour search under cosine similarity.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub(crate) const NORM_EPS: f64 = 1e-12;

/// Copy of `x` with every row scaled to unit length (`z / max(|z|, 1e-12)`).
pub fn normalize_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        row.mapv_inplace(|v| v / n);
    }
    out
}

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(NORM_EPS);
    let nb = b.dot(&b).sqrt().max(NORM_EPS);
    a.dot(&b) / (na * nb)
}

/// Higher similarity first, then lower index.
fn by_similarity(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// For every index in `members`, the `k` most cosine-similar other members,
/// most similar first, ties broken by lower index. Returned indices are row
/// indices of `emb`.
pub fn knn_within(emb: ArrayView2<'_, f64>, members: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if members.len() <= k {
        return Err(Error::Insufficient(format!(
            "need more than {k} points for {k} nearest neighbours, got {}",
            members.len()
        )));
    }
    let unit = normalize_rows(emb);
    let result = members
        .par_iter()
        .map(|&q| {
            let zq = unit.row(q);
            let mut cand: Vec<(f64, usize)> = members
                .iter()
                .filter(|&&j| j != q)
                .map(|&j| (zq.dot(&unit.row(j)), j))
                .collect();
            if k < cand.len() {
                cand.select_nth_unstable_by(k, by_similarity);
                cand.truncate(k);
            }
            cand.sort_by(by_similarity);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(result)
}

/// `knn_within` over all rows of `emb`.
pub fn knn_all(emb: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let members: Vec<usize> = (0..emb.nrows()).collect();
    knn_within(emb, &members, k)
}
