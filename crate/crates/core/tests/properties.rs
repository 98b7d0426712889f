mod common;

use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

use tlss_core::cluster::{kl_cluster_loss, soft_assign, target_dist};
use tlss_core::distill::{dl_loss, gcl_loss, GuidedTriple};
use tlss_core::encoder::{self, EncoderConfig};
use tlss_core::eval::{chi, dbi};
use tlss_core::knn::normalize_rows;
use tlss_core::pretrain::dd_loss;
use tlss_core::rng;
use tlss_core::tailness::{allocate_budget, instance_tailness, sample_ood, BudgetAllocation};

use common::*;

fn softmax_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    x
}

/// Product of random plane rotations: an orthogonal matrix.
fn random_rotation(d: usize, rng: &mut rng::Rng) -> Array2<f64> {
    let mut r = Array2::<f64>::eye(d);
    for _ in 0..3 * d {
        let i = rng.random_range(0..d);
        let j = (i + rng.random_range(1..d)) % d;
        let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut g = Array2::<f64>::eye(d);
        g[[i, i]] = t.cos();
        g[[j, j]] = t.cos();
        g[[i, j]] = -t.sin();
        g[[j, i]] = t.sin();
        r = g.dot(&r);
    }
    r
}

fn labelled(seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = rng::from_seed(seed);
    let k = rng.random_range(2..5);
    let centers = gaussian(k, 4, &mut rng) * 3.0;
    clouds(&centers, rng.random_range(3..8), 1.0, &mut rng)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn budgets_are_conserved_and_monotone(
        scores in prop::collection::vec(-5.0f64..0.0, 1..25),
        total in 0usize..50_000,
        tau in 0.05f64..10.0,
    ) {
        let a = allocate_budget(&scores, total, tau).unwrap();
        prop_assert_eq!(a.budgets.iter().sum::<usize>(), total);
        for j in 0..scores.len() {
            for k in 0..scores.len() {
                if scores[j] > scores[k] {
                    prop_assert!(a.budgets[j] >= a.budgets[k]);
                }
            }
        }
    }

    #[test]
    fn equal_scores_split_evenly(n in 1usize..20, total in 0usize..1000, v in -3.0f64..0.0) {
        let a = allocate_budget(&vec![v; n], total, 1.0).unwrap();
        let (lo, hi) = (a.budgets.iter().min().unwrap(), a.budgets.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn soft_and_target_rows_are_distributions(seed in any::<u64>(), n in 1usize..30, k in 1usize..6) {
        let mut rng = rng::from_seed(seed);
        let x = gaussian(n, 3, &mut rng);
        let c = gaussian(k, 3, &mut rng);
        let q = soft_assign(x.view(), c.view()).q;
        let p = target_dist(q.view());
        for row in q.axis_iter(Axis(0)).chain(p.axis_iter(Axis(0))) {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), n in 1usize..10, k in 1usize..6) {
        let mut rng = rng::from_seed(seed);
        let p = softmax_rows(gaussian(n, k, &mut rng) * 3.0);
        let q = softmax_rows(gaussian(n, k, &mut rng) * 3.0);
        prop_assert!(kl_cluster_loss(p.view(), q.view()) >= -1e-12);
        prop_assert!(kl_cluster_loss(q.view(), q.view()).abs() < 1e-12);
    }

    #[test]
    fn target_sharpens_under_equal_frequencies(seed in any::<u64>(), k in 2usize..6) {
        // Cyclic shifts of one row give equal column sums.
        let mut rng = rng::from_seed(seed);
        let base = softmax_rows(gaussian(1, k, &mut rng));
        let q = Array2::from_shape_fn((k, k), |(i, j)| base[[0, (j + i) % k]]);
        let p = target_dist(q.view());
        for i in 0..k {
            let row = q.row(i);
            let arg = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            prop_assert!(p[[i, arg]] >= q[[i, arg]] - 1e-12);
        }
    }

    #[test]
    fn dd_is_non_negative(seed in any::<u64>()) {
        let mut rng = rng::from_seed(seed);
        let n = rng.random_range(3..12);
        let emb = normalize_rows(gaussian(n, 4, &mut rng).view());
        let tau = rng.random_range(0.05..2.0);
        let anchors: Vec<usize> = (0..n).collect();
        let same: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + 1) % n]).collect();
        let diff: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + 2) % n, (i + 3) % n]).collect();
        prop_assert!(dd_loss(emb.view(), &anchors, &same, &diff, tau).unwrap().value >= 0.0);
    }

    #[test]
    fn stage_two_losses_are_non_negative(seed in any::<u64>()) {
        let mut rng = rng::from_seed(seed);
        let n = rng.random_range(3..10);
        let y = gaussian(n, 4, &mut rng);
        let z = gaussian(n, 4, &mut rng);
        let triples: Vec<GuidedTriple> = (0..n)
            .map(|i| GuidedTriple {
                anchor: i,
                positive: rng.random_range(0..n),
                negative: rng.random_range(0..n),
                w_pos: rng.random_range(-1.0..=1.0),
                w_neg: rng.random_range(-1.0..=1.0),
            })
            .collect();
        prop_assert!(gcl_loss(y.view(), &triples).unwrap().value >= 0.0);
        prop_assert!(dl_loss(z.view(), y.view()).unwrap().value >= 0.0);
    }

    #[test]
    fn tailness_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = rng::from_seed(seed);
        let n = rng.random_range(6..25);
        let x = gaussian(n, 5, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let s = instance_tailness(x.view(), 4).unwrap();
        let sp = instance_tailness(x.select(Axis(0), &perm).view(), 4).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            prop_assert!((sp[r] - s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn selected_ood_is_unique_and_budgeted(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = rng::from_seed(seed);
        let pool = gaussian(40, 3, &mut rng);
        let centroids = gaussian(k, 3, &mut rng);
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..-1.0)).collect();
        let budgets: Vec<usize> = (0..k).map(|_| rng.random_range(0..10)).collect();
        let alloc = BudgetAllocation { total: budgets.iter().sum(), budgets: budgets.clone(), tau: 1.0, scores };
        let picked = sample_ood(pool.view(), centroids.view(), &alloc).unwrap();
        let mut all: Vec<usize> = picked.iter().flatten().copied().collect();
        for (sel, b) in picked.iter().zip(&budgets) {
            prop_assert_eq!(sel.len(), *b);
        }
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn encoder_rows_are_unit_and_pure(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = rng::from_seed(seed);
        let cfg = EncoderConfig { input_dim: 5, hidden_dims: vec![7], embed_dim: 3, seed, ..EncoderConfig::default() };
        let params = encoder::init(&cfg).unwrap();
        let mut x = gaussian(n, 5, &mut rng) * 4.0;
        let first = x.row(0).to_owned();
        x.push_row(first.view()).unwrap();
        let y = encoder::forward(&cfg, &params, x.view()).unwrap();
        // A row is zero only when every ReLU unit is dead and the guard kicks in.
        for row in y.axis_iter(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6 || norm == 0.0);
        }
        prop_assert_eq!(y.row(0), y.row(n));
    }

    #[test]
    fn chi_and_dbi_ignore_rotation_translation_and_label_names(seed in any::<u64>()) {
        let (x, labels) = labelled(seed);
        let mut rng = rng::from_seed(seed ^ 1);
        let r = random_rotation(x.ncols(), &mut rng);
        let shift: Array1<f64> = Array1::from_shape_simple_fn(x.ncols(), || rng.random_range(-5.0..5.0));
        let moved = x.dot(&r.t()) + &shift;
        let k = labels.iter().max().unwrap() + 1;
        let renamed: Vec<usize> = labels.iter().map(|&y| k - 1 - y).collect();
        let (c, d) = (chi(x.view(), &labels).unwrap(), dbi(x.view(), &labels).unwrap());
        prop_assert!(close(c, chi(moved.view(), &labels).unwrap()));
        prop_assert!(close(d, dbi(moved.view(), &labels).unwrap()));
        prop_assert!(close(c, chi(x.view(), &renamed).unwrap()));
        prop_assert!(close(d, dbi(x.view(), &renamed).unwrap()));
    }
}
