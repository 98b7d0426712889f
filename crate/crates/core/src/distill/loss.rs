//! Stage-2 losses: guided contrastive loss and similarity distillation loss.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::knn::NORM_EPS;
use crate::pretrain::loss::LossOutput;

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grad(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let na_raw = a.dot(&a).sqrt();
    let nb_raw = b.dot(&b).sqrt();
    let na = na_raw.max(NORM_EPS);
    let nb = nb_raw.max(NORM_EPS);
    let c = a.dot(&b) / (na * nb);
    // Below the guard the norm is a constant and only the numerator varies.
    let ga = if na_raw > NORM_EPS { &b / (na * nb) - &a * (c / (na * na)) } else { &b / (na * nb) };
    let gb = if nb_raw > NORM_EPS { &a / (na * nb) - &b * (c / (nb * nb)) } else { &a / (na * nb) };
    (c, ga, gb)
}

/// One anchor with its guided positive and negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidedTriple {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Cosine of anchor and positive under the guiding network.
    pub w_pos: f64,
    /// Cosine of anchor and negative under the guiding network.
    pub w_neg: f64,
}

/// Guided contrastive loss
///
/// `L = (1/B) Σ_i [ (1 + w_pos)(1 - cos(y_i, y_p)) + (1 - w_neg)(1 + cos(y_i, y_n)) ]`
///
/// with `w_pos`, `w_neg` constants in `[-1, 1]`; every term is non-negative.
pub fn gcl_loss(emb: ArrayView2<'_, f64>, triples: &[GuidedTriple]) -> Result<LossOutput> {
    let b = triples.len();
    if b == 0 {
        return Err(Error::Insufficient("empty batch".into()));
    }
    let n = emb.nrows();
    let mut adj = Array2::<f64>::zeros(emb.raw_dim());
    let mut total = 0.0;
    for t in triples {
        if t.anchor.max(t.positive).max(t.negative) >= n {
            return Err(Error::DimensionMismatch { expected: n, got: t.anchor.max(t.positive).max(t.negative) + 1 });
        }
        if !(-1.0..=1.0).contains(&t.w_pos) || !(-1.0..=1.0).contains(&t.w_neg) {
            return Err(Error::config(format!("guide weights must lie in [-1, 1], got ({}, {})", t.w_pos, t.w_neg)));
        }
        let (cp, ga_p, gp) = cosine_with_grad(emb.row(t.anchor), emb.row(t.positive));
        let (cn, ga_n, gn) = cosine_with_grad(emb.row(t.anchor), emb.row(t.negative));
        let a_pos = 1.0 + t.w_pos;
        let a_neg = 1.0 - t.w_neg;
        total += a_pos * (1.0 - cp) + a_neg * (1.0 + cn);
        let inv_b = 1.0 / b as f64;
        adj.row_mut(t.anchor).scaled_add(-a_pos * inv_b, &ga_p);
        adj.row_mut(t.positive).scaled_add(-a_pos * inv_b, &gp);
        adj.row_mut(t.anchor).scaled_add(a_neg * inv_b, &ga_n);
        adj.row_mut(t.negative).scaled_add(a_neg * inv_b, &gn);
    }
    Ok(LossOutput { value: total / b as f64, adjoint: adj })
}

fn unit_rows(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = x.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
    let mut u = x.to_owned();
    for (mut row, n) in u.axis_iter_mut(Axis(0)).zip(&norms) {
        row.mapv_inplace(|v| v / n.max(NORM_EPS));
    }
    (u, norms)
}

/// Cosine-similarity matrix of the rows of `x`.
pub fn cosine_matrix(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (u, _) = unit_rows(x);
    u.dot(&u.t())
}

/// Distillation loss
///
/// `L = 1/(B(B-1)) Σ_i Σ_{j≠i} (cos(z_i, z_j) - cos(y_i, y_j))^2`
///
/// where `z` are guiding-network embeddings (constants) and `y` are the
/// trained network's. The adjoint is with respect to `y`.
pub fn dl_loss(z: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<LossOutput> {
    let b = y.nrows();
    if b < 2 {
        return Err(Error::Insufficient(format!("distillation needs a batch of at least 2, got {b}")));
    }
    if z.nrows() != b {
        return Err(Error::DimensionMismatch { expected: b, got: z.nrows() });
    }
    let sf = cosine_matrix(z);
    let (u, norms) = unit_rows(y);
    let sg = u.dot(&u.t());
    let scale = 1.0 / (b * (b - 1)) as f64;
    let mut diff = &sf - &sg;
    diff.diag_mut().fill(0.0);
    let value = diff.iter().map(|d| d * d).sum::<f64>() * scale;
    // dL/dS_g = -2 (S_f - S_g) scale; S_g = U U^T.
    let g_s = diff.mapv(|d| -2.0 * d * scale);
    let g_u = (&g_s + &g_s.t()).dot(&u);
    let mut adj = Array2::<f64>::zeros(y.raw_dim());
    for (i, mut row) in adj.axis_iter_mut(Axis(0)).enumerate() {
        let gu = g_u.row(i);
        if norms[i] > NORM_EPS {
            let ui = u.row(i);
            row.assign(&((&gu - &(&ui * ui.dot(&gu))) / norms[i]));
        } else {
            row.assign(&(&gu / NORM_EPS));
        }
    }
    Ok(LossOutput { value, adjoint: adj })
}

/// Combined stage-2 objective `gcl + beta * dl`.
pub fn gl_loss(gcl: &LossOutput, dl: &LossOutput, beta: f64) -> LossOutput {
    gcl.clone().add_scaled(beta, dl)
}
