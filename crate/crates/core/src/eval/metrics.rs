//! Cluster-quality indices over labeled embeddings.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

const EPS: f64 = 1e-12;

fn l2(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Compact class ids and per-class centroids. Returns (centroids, counts, dense labels).
fn centroids(emb: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(Array2<f64>, Vec<usize>, Vec<usize>)> {
    if emb.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: emb.nrows(), got: labels.len() });
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Insufficient(format!("cluster indices need at least 2 classes, got {}", ids.len())));
    }
    let dense: Vec<usize> = labels.iter().map(|y| ids.binary_search(y).expect("present")).collect();
    let k = ids.len();
    let mut cen = Array2::<f64>::zeros((k, emb.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &c) in emb.axis_iter(Axis(0)).zip(&dense) {
        cen.row_mut(c).scaled_add(1.0, &row);
        counts[c] += 1;
    }
    for (mut row, &n) in cen.axis_iter_mut(Axis(0)).zip(&counts) {
        row /= n as f64;
    }
    Ok((cen, counts, dense))
}

/// Calinski-Harabasz index: between-class over within-class dispersion,
/// each divided by its degrees of freedom.
pub fn chi(emb: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (cen, counts, dense) = centroids(emb, labels)?;
    let n = emb.nrows();
    let k = cen.nrows();
    if n <= k {
        return Err(Error::Insufficient(format!("CHI needs more samples ({n}) than classes ({k})")));
    }
    let mean = emb.mean_axis(Axis(0)).expect("non-empty");
    let between: f64 = cen
        .axis_iter(Axis(0))
        .zip(&counts)
        .map(|(c, &m)| m as f64 * l2(c, mean.view()).powi(2))
        .sum();
    let within: f64 = emb.axis_iter(Axis(0)).zip(&dense).map(|(x, &c)| l2(x, cen.row(c)).powi(2)).sum();
    Ok((between / (k - 1) as f64) / (within.max(EPS) / (n - k) as f64))
}

/// Davies-Bouldin index: mean over classes of the worst scatter-to-separation ratio.
pub fn dbi(emb: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (cen, counts, dense) = centroids(emb, labels)?;
    let k = cen.nrows();
    let mut scatter = vec![0.0; k];
    for (x, &c) in emb.axis_iter(Axis(0)).zip(&dense) {
        scatter[c] += l2(x, cen.row(c));
    }
    for (s, &n) in scatter.iter_mut().zip(&counts) {
        *s /= n as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let worst = (0..k)
            .filter(|&j| j != i)
            .map(|j| (scatter[i] + scatter[j]) / l2(cen.row(i), cen.row(j)).max(EPS))
            .fold(f64::NEG_INFINITY, f64::max);
        total += worst;
    }
    Ok(total / k as f64)
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let sum_cells: f64 = table.iter().flatten().map(|&n| choose2(n)).sum();
    let sum_a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(a.len());
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < EPS {
        // Both labelings are trivial (one cluster or all singletons).
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok((sum_cells - expected) / (max - expected))
}
