//! Oracles and instance generators shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;

use tlss_core::distill::{dl_loss, gcl_loss, GuidedTriple};
use tlss_core::encoder::{self, Activation, EncoderConfig, EncoderParams};
use tlss_core::knn::normalize_rows;
use tlss_core::pretrain::{dd_loss, psd_loss, LossOutput};
use tlss_core::rng::{self, Rng};

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|)` over whole gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Central differences of `f` at `x`.
pub fn fd_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn nonempty_subset(n: usize, rng: &mut Rng) -> Vec<usize> {
    let m = rng.random_range(1..=n);
    let mut v = index::sample(rng, n, m).into_vec();
    v.sort_unstable();
    v
}

fn reshape(flat: &[f64], like: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_vec(like.raw_dim(), flat.to_vec()).expect("same size")
}

/// A loss over an embedding matrix: value and adjoint at any point.
pub type LossFn = Box<dyn Fn(ArrayView2<'_, f64>) -> LossOutput>;

/// Random unit-norm rows with anchors and positive/negative sets.
pub fn psd_instance(rng: &mut Rng) -> (Array2<f64>, LossFn) {
    let n = rng.random_range(5..10);
    let emb = normalize_rows(gaussian(n, rng.random_range(3..7), rng).view());
    let b = rng.random_range(1..4);
    let anchors: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
    let pos: Vec<Vec<usize>> = (0..b).map(|_| nonempty_subset(n, rng)).collect();
    let neg: Vec<Vec<usize>> = (0..b).map(|_| nonempty_subset(n, rng)).collect();
    let tau = rng.random_range(0.2..1.0);
    (emb, Box::new(move |e| psd_loss(e, &anchors, &pos, &neg, tau).expect("valid instance")))
}

pub fn dd_instance(rng: &mut Rng) -> (Array2<f64>, LossFn) {
    let n = rng.random_range(5..10);
    let emb = normalize_rows(gaussian(n, rng.random_range(3..7), rng).view());
    let b = rng.random_range(1..4);
    let anchors: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
    let same: Vec<Vec<usize>> = (0..b).map(|_| nonempty_subset(n, rng)).collect();
    let diff: Vec<Vec<usize>> = (0..b).map(|_| nonempty_subset(n, rng)).collect();
    let tau = rng.random_range(0.2..1.0);
    (emb, Box::new(move |e| dd_loss(e, &anchors, &same, &diff, tau).expect("valid instance")))
}

/// Unnormalized rows; the loss normalizes internally.
pub fn gcl_instance(rng: &mut Rng) -> (Array2<f64>, LossFn) {
    let n = rng.random_range(4..9);
    let emb = gaussian(n, rng.random_range(3..7), rng);
    let triples: Vec<GuidedTriple> = (0..rng.random_range(1..5))
        .map(|_| GuidedTriple {
            anchor: rng.random_range(0..n),
            positive: rng.random_range(0..n),
            negative: rng.random_range(0..n),
            w_pos: rng.random_range(-1.0..=1.0),
            w_neg: rng.random_range(-1.0..=1.0),
        })
        .collect();
    (emb, Box::new(move |e| gcl_loss(e, &triples).expect("valid instance")))
}

/// Trained rows `y` are the variable; guide rows `z` are fixed.
pub fn dl_instance(rng: &mut Rng) -> (Array2<f64>, LossFn) {
    let b = rng.random_range(2..8);
    let d = rng.random_range(3..7);
    let z = gaussian(b, d, rng);
    let y = gaussian(b, rng.random_range(3..7), rng);
    (y, Box::new(move |e| dl_loss(z.view(), e).expect("valid instance")))
}

/// Relative error between a loss's adjoint and finite differences.
pub fn loss_grad_error(emb: &Array2<f64>, loss: &LossFn) -> f64 {
    let analytic = loss(emb.view()).adjoint;
    let flat: Vec<f64> = emb.iter().copied().collect();
    let numeric = fd_grad(&flat, |x| loss(reshape(x, emb.view()).view()).value);
    rel_err(analytic.as_slice().expect("standard layout"), &numeric)
}

/// A random small net, batch and downstream loss. The scalar checked is the
/// loss of the encoder output, differentiated w.r.t. every parameter.
pub fn encoder_grad_error(rng: &mut Rng, activation: Activation) -> f64 {
    let input_dim = rng.random_range(2..6);
    let n_hidden = rng.random_range(1..3);
    let hidden_dims: Vec<usize> = (0..n_hidden).map(|_| rng.random_range(3..7)).collect();
    let cfg = EncoderConfig { input_dim, hidden_dims, embed_dim: rng.random_range(2..5), activation, seed: rng.random() };
    let mut params = encoder::init(&cfg).expect("valid config");
    // Non-zero biases so every code path is exercised.
    for l in &mut params.layers {
        l.bias.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal) * 0.3);
    }
    let n = rng.random_range(3..7);
    let x = gaussian(n, input_dim, rng);
    let downstream = rng.random_range(0..3);
    let g = gaussian(n, cfg.embed_dim, rng);
    let (anchors, pos, neg): (Vec<usize>, Vec<Vec<usize>>, Vec<Vec<usize>>) =
        ((0..n).collect(), (0..n).map(|i| vec![(i + 1) % n]).collect(), (0..n).map(|_| (0..n).collect()).collect());
    let z = gaussian(n, 3, rng);
    let loss = move |emb: ArrayView2<'_, f64>| -> LossOutput {
        match downstream {
            0 => LossOutput { value: (&emb * &g).sum(), adjoint: g.clone() },
            1 => psd_loss(emb, &anchors, &pos, &neg, 0.5).expect("valid"),
            _ => dl_loss(z.view(), emb).expect("valid"),
        }
    };
    let cache = encoder::forward_cached(&cfg, &params, x.view()).expect("forward");
    let adj = loss(cache.embeddings().view()).adjoint;
    let analytic = encoder::backward(&cfg, &params, &cache, adj.view()).expect("backward").to_flat();
    let flat = params.to_flat();
    let mut scratch: EncoderParams = params.clone();
    let numeric = fd_grad(&flat, |p| {
        scratch.set_flat(p).expect("same size");
        let emb = encoder::forward(&cfg, &scratch, x.view()).expect("forward");
        loss(emb.view()).value
    });
    rel_err(&analytic, &numeric)
}

/// Gaussian clouds around `centers` with `per` points each; labels by cloud.
pub fn clouds(centers: &Array2<f64>, per: usize, sigma: f64, rng: &mut Rng) -> (Array2<f64>, Vec<usize>) {
    let (k, d) = centers.dim();
    let mut x = Array2::zeros((k * per, d));
    let mut labels = Vec::with_capacity(k * per);
    for c in 0..k {
        for r in 0..per {
            let noise: Array1<f64> = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal) * sigma);
            x.row_mut(c * per + r).assign(&(&centers.row(c) + &noise));
            labels.push(c);
        }
    }
    (x, labels)
}

/// Three clouds (n = 90, D = 8) with centers on scaled coordinate axes.
pub fn three_clouds(seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = rng::from_seed(seed);
    let mut centers = Array2::zeros((3, 8));
    for c in 0..3 {
        centers[[c, c]] = 8.0;
    }
    clouds(&centers, 30, 1.0, &mut rng)
}

/// A dense and a sparse cloud of 50 points each in D = 8, far from the
/// origin so cosine neighbourhoods reflect the spread. Rows 0..50 are dense.
pub fn dense_and_sparse(seed: u64) -> Array2<f64> {
    let mut rng = rng::from_seed(seed);
    let mut x = Array2::zeros((100, 8));
    for (block, (axis, sigma)) in [(0usize, 0.3), (1, 1.5)].into_iter().enumerate() {
        let mut center = Array1::<f64>::zeros(8);
        center[axis] = 6.0;
        for r in 0..50 {
            let noise: Array1<f64> = Array1::from_shape_simple_fn(8, || rng.sample::<f64, _>(StandardNormal) * sigma);
            x.row_mut(block * 50 + r).assign(&(&center + &noise));
        }
    }
    x
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
