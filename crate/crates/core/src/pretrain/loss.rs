//! Stage-1 contrastive losses over rows of an embedding matrix.
//!
//! Both losses take the full matrix of embeddings produced by one forward
//! pass, a list of anchor rows, and per-anchor row sets. Similarities are raw
//! dot products divided by the temperature, so rows are expected to be unit
//! norm. The returned adjoint has the shape of the embedding matrix.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `dL/d(embeddings)`.
    pub adjoint: Array2<f64>,
}

impl LossOutput {
    /// `self + weight * other`, adjoints combined the same way.
    pub fn add_scaled(mut self, weight: f64, other: &LossOutput) -> LossOutput {
        self.value += weight * other.value;
        self.adjoint.scaled_add(weight, &other.adjoint);
        self
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Accumulate `coef * d(z_a · z_b / tau)` into the adjoint.
fn add_pair_grad(adj: &mut Array2<f64>, emb: ArrayView2<'_, f64>, a: usize, b: usize, coef: f64) {
    let za = emb.row(a).to_owned();
    let zb = emb.row(b).to_owned();
    adj.row_mut(a).scaled_add(coef, &zb);
    adj.row_mut(b).scaled_add(coef, &za);
}

fn check_rows(emb: ArrayView2<'_, f64>, sets: &[&[usize]]) -> Result<()> {
    let n = emb.nrows();
    for s in sets {
        if let Some(&bad) = s.iter().find(|&&j| j >= n) {
            return Err(Error::DimensionMismatch { expected: n, got: bad + 1 });
        }
    }
    Ok(())
}

/// Pseudo semantic discrimination loss
///
/// `L = -(1/B) Σ_i log( Σ_{j∈pos_i} exp(z_i·z_j/τ) / Σ_{j∈neg_i} exp(z_i·z_j/τ) )`.
///
/// The denominator holds negatives only, so the value is not bounded below.
pub fn psd_loss(
    emb: ArrayView2<'_, f64>,
    anchors: &[usize],
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<LossOutput> {
    let b = anchors.len();
    if b == 0 {
        return Err(Error::Insufficient("empty batch".into()));
    }
    if positives.len() != b || negatives.len() != b {
        return Err(Error::DimensionMismatch { expected: b, got: positives.len().min(negatives.len()) });
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    check_rows(emb, &[anchors])?;
    let mut adj = Array2::<f64>::zeros(emb.raw_dim());
    let mut total = 0.0;
    for (k, &i) in anchors.iter().enumerate() {
        let (pos, neg) = (&positives[k], &negatives[k]);
        if pos.is_empty() {
            return Err(Error::Insufficient(format!("anchor {i} has no positives")));
        }
        if neg.is_empty() {
            return Err(Error::Insufficient(format!("anchor {i} has no negatives")));
        }
        check_rows(emb, &[pos, neg])?;
        let zi = emb.row(i);
        let sp: Vec<f64> = pos.iter().map(|&j| zi.dot(&emb.row(j)) / tau).collect();
        let sn: Vec<f64> = neg.iter().map(|&j| zi.dot(&emb.row(j)) / tau).collect();
        let lp = log_sum_exp(&sp);
        let ln = log_sum_exp(&sn);
        total += -(lp - ln);
        let scale = 1.0 / (b as f64 * tau);
        for (&j, s) in pos.iter().zip(&sp) {
            add_pair_grad(&mut adj, emb, i, j, -scale * (s - lp).exp());
        }
        for (&j, s) in neg.iter().zip(&sn) {
            add_pair_grad(&mut adj, emb, i, j, scale * (s - ln).exp());
        }
    }
    Ok(LossOutput { value: total / b as f64, adjoint: adj })
}

/// Domain discrimination loss
///
/// `L = -(1/B) Σ_i (1/|S_i|) Σ_{p∈S_i} log( e^{z_i·z_p/τ} / (e^{z_i·z_p/τ} + Σ_{n∈D_i} e^{z_i·z_n/τ}) )`
///
/// where `S_i` are same-domain rows and `D_i` different-domain rows. Every
/// term is the log of a probability, so `L >= 0`.
pub fn dd_loss(
    emb: ArrayView2<'_, f64>,
    anchors: &[usize],
    same: &[Vec<usize>],
    different: &[Vec<usize>],
    tau: f64,
) -> Result<LossOutput> {
    let b = anchors.len();
    if b == 0 {
        return Err(Error::Insufficient("empty batch".into()));
    }
    if same.len() != b || different.len() != b {
        return Err(Error::DimensionMismatch { expected: b, got: same.len().min(different.len()) });
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    check_rows(emb, &[anchors])?;
    let mut adj = Array2::<f64>::zeros(emb.raw_dim());
    let mut total = 0.0;
    for (k, &i) in anchors.iter().enumerate() {
        let (sp_set, dn_set) = (&same[k], &different[k]);
        if sp_set.is_empty() || dn_set.is_empty() {
            return Err(Error::Insufficient(format!(
                "anchor {i} needs both same-domain and different-domain partners"
            )));
        }
        check_rows(emb, &[sp_set, dn_set])?;
        let zi = emb.row(i);
        let sn: Vec<f64> = dn_set.iter().map(|&j| zi.dot(&emb.row(j)) / tau).collect();
        let ln = log_sum_exp(&sn);
        let coef = -1.0 / (b as f64 * sp_set.len() as f64);
        let mut neg_weight = vec![0.0; dn_set.len()];
        for &p in sp_set.iter() {
            let s = zi.dot(&emb.row(p)) / tau;
            // log(e^s + e^ln) without overflow.
            let log_d = s.max(ln) + (-(s - ln).abs()).exp().ln_1p();
            total += coef * (s - log_d);
            add_pair_grad(&mut adj, emb, i, p, coef * (1.0 - (s - log_d).exp()) / tau);
            for (w, sv) in neg_weight.iter_mut().zip(&sn) {
                *w += (sv - log_d).exp();
            }
        }
        for (&n, w) in dn_set.iter().zip(neg_weight) {
            add_pair_grad(&mut adj, emb, i, n, -coef * w / tau);
        }
    }
    Ok(LossOutput { value: total, adjoint: adj })
}

/// Combined stage-1 objective `psd + alpha * dd`.
pub fn cpt_loss(psd: &LossOutput, dd: &LossOutput, alpha: f64) -> LossOutput {
    psd.clone().add_scaled(alpha, dd)
}
