//! Derived examples checked against brute force or independent formulas.

mod common;

use ndarray::{array, Array2, Axis};
use rand::Rng as _;

use tlss_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tlss_core::cluster::{self, kmeans_init, ClusterConfig, ClusterModel};
use tlss_core::distill::{guide_index_from_embeddings, sample_guide_pair};
use tlss_core::eval::probe::accuracy;
use tlss_core::eval::{adjusted_rand_index, chi, dbi, ProbeModel};
use tlss_core::knn::knn_all;
use tlss_core::synthdata::{self, class_counts, gen_balanced, load_dataset, save_dataset};
use tlss_core::tailness::{instance_tailness, sample_ood, BudgetAllocation};
use tlss_core::{rng, Encoder, EncoderConfig, Error, LongTailSpec};

use common::*;

#[test]
fn long_tail_counts() {
    let counts = class_counts(&LongTailSpec::default()).unwrap();
    assert_eq!((counts[0], counts[9]), (500, 5));
    let two = LongTailSpec { n_classes: 2, max_per_class: 8, imbalance_ratio: 4.0, ..LongTailSpec::default() };
    assert_eq!(class_counts(&two).unwrap(), vec![8, 2]);
}

fn sse(x: &Array2<f64>, part: &[usize]) -> f64 {
    (0..2)
        .map(|k| {
            let rows: Vec<usize> = (0..x.nrows()).filter(|&i| part[i] == k).collect();
            if rows.is_empty() {
                return 0.0;
            }
            let sel = x.select(Axis(0), &rows);
            let mean = sel.mean_axis(Axis(0)).unwrap();
            sel.axis_iter(Axis(0)).map(|r| (&r - &mean).mapv(|v| v * v).sum()).sum::<f64>()
        })
        .sum()
}

#[test]
fn kmeans_matches_best_two_partition() {
    for seed in 0..5 {
        let mut rng = rng::from_seed(seed);
        let centers = array![[0.0, 0.0, 0.0], [9.0, 9.0, 0.0]];
        let (x, _) = clouds(&centers, 6, 1.0, &mut rng);
        let n = x.nrows();
        // Exhaustive search; point 0 fixed in part 0 to skip mirror images.
        let best = (0..1u32 << (n - 1))
            .map(|mask| (0..n).map(|i| if i > 0 && mask >> (i - 1) & 1 == 1 { 1 } else { 0 }).collect::<Vec<usize>>())
            .min_by(|a, b| sse(&x, a).partial_cmp(&sse(&x, b)).unwrap())
            .unwrap();
        let c = kmeans_init(x.view(), 2, seed).unwrap();
        let assign = cluster::hard_assign(x.view(), c.view());
        assert_eq!(adjusted_rand_index(&assign, &best).unwrap(), 1.0, "seed {seed}");
        for k in 0..2 {
            let rows: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
            let mean = x.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap();
            assert!((&c.row(k) - &mean).iter().all(|v| v.abs() < 1e-9));
        }
    }
}

#[test]
fn three_clouds_are_recovered() {
    let cfg = ClusterConfig { n_clusters: 3, ..ClusterConfig::default() };
    let hits = (0..10)
        .filter(|&seed| {
            let (x, truth) = three_clouds(seed);
            let m = cluster::cluster(x.view(), &cfg, rng::derive_seed(seed, rng::CLUSTERING)).unwrap();
            adjusted_rand_index(&m.assignments, &truth).unwrap() == 1.0
        })
        .count();
    assert!(hits >= 9, "ARI = 1 on only {hits}/10 seeds");
}

#[test]
fn sparse_cloud_scores_higher() {
    let wins = (0..100)
        .filter(|&seed| {
            let s = instance_tailness(dense_and_sparse(seed).view(), 10).unwrap();
            s[50..].iter().sum::<f64>() > s[..50].iter().sum::<f64>()
        })
        .count();
    assert!(wins >= 95, "sparse cloud ahead in only {wins}/100 seeds");
}

#[test]
fn ood_goes_to_constructed_clusters() {
    let mut rng = rng::from_seed(9);
    let centroids = array![[5.0, 0.0], [-5.0, 0.0]];
    let mut pool = Array2::zeros((18, 2));
    for i in 0..18 {
        let side = if i % 3 == 0 { -5.0 } else { 5.0 };
        pool[[i, 0]] = side + rng.random_range(-1.0..1.0);
        pool[[i, 1]] = rng.random_range(-1.0..1.0);
    }
    let truth = cluster::hard_assign(pool.view(), centroids.view());
    let budgets = vec![truth.iter().filter(|&&k| k == 0).count(), truth.iter().filter(|&&k| k == 1).count()];
    let alloc = BudgetAllocation { total: 18, budgets, tau: 1.0, scores: vec![-2.0, -1.0] };
    let picked = sample_ood(pool.view(), centroids.view(), &alloc).unwrap();
    for (k, sel) in picked.iter().enumerate() {
        let mut want: Vec<usize> = (0..18).filter(|&i| truth[i] == k).collect();
        let mut got = sel.clone();
        want.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, want, "cluster {k}");
    }
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = rng::from_seed(4);
    let x = gaussian(50, 6, &mut rng);
    let nn = knn_all(x.view(), 7).unwrap();
    let norm = |i: usize| x.row(i).dot(&x.row(i)).sqrt();
    for i in 0..50 {
        let mut all: Vec<(f64, usize)> =
            (0..50).filter(|&j| j != i).map(|j| (x.row(i).dot(&x.row(j)) / (norm(i) * norm(j)), j)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all[..7].iter().map(|p| p.1).collect();
        assert_eq!(nn[i], want, "row {i}");
    }
}

#[test]
fn guide_positives_are_uniform() {
    let mut rng = rng::from_seed(10);
    let centers = array![[4.0, 0.0, 0.0], [0.0, 4.0, 0.0]];
    let (x, labels) = clouds(&centers, 20, 0.5, &mut rng);
    let c = array![[4.0, 0.0, 0.0], [0.0, 4.0, 0.0]];
    let index = guide_index_from_embeddings(x, ClusterModel { centroids: c, assignments: labels }, 5).unwrap();
    let mut draws = rng::from_seed(11);
    let mut freq = [0usize; 5];
    for _ in 0..10_000 {
        let pair = sample_guide_pair(&index, 0, &mut draws).unwrap();
        let slot = index.neighbors[0].iter().position(|&j| j == pair.positive).unwrap();
        freq[slot] += 1;
    }
    for (slot, &f) in freq.iter().enumerate() {
        let share = f as f64 / 10_000.0;
        assert!((share - 0.2).abs() <= 0.02, "neighbour {slot}: {share}");
    }
}

#[test]
fn untrained_probe_is_at_chance() {
    let spec = LongTailSpec::default();
    let test = gen_balanced(&spec, 100, 3).unwrap();
    let probe = ProbeModel::zeros(spec.dim, spec.n_classes);
    let acc = accuracy(&probe, test.features_f64().view(), &test.require_labels().unwrap()).unwrap();
    // Binomial 99.9% interval around 1/10 with n = 1000.
    let sd = (0.1f64 * 0.9 / 1000.0).sqrt();
    assert!((acc - 0.1).abs() <= 3.3 * sd, "accuracy {acc}");
}

fn textbook_chi(x: &[Vec<f64>], y: &[usize]) -> f64 {
    let (n, d) = (x.len(), x[0].len());
    let k = y.iter().max().unwrap() + 1;
    let mut mean = vec![0.0; d];
    let mut cen = vec![vec![0.0; d]; k];
    let mut cnt = vec![0.0; k];
    for (row, &c) in x.iter().zip(y) {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
            cen[c][j] += row[j];
        }
        cnt[c] += 1.0;
    }
    for c in 0..k {
        for j in 0..d {
            cen[c][j] /= cnt[c];
        }
    }
    // Between = total - within.
    let (mut total, mut within) = (0.0, 0.0);
    for (row, &c) in x.iter().zip(y) {
        for j in 0..d {
            total += (row[j] - mean[j]).powi(2);
            within += (row[j] - cen[c][j]).powi(2);
        }
    }
    ((total - within) / (k - 1) as f64) / (within / (n - k) as f64)
}

fn textbook_dbi(x: &[Vec<f64>], y: &[usize]) -> f64 {
    let d = x[0].len();
    let k = y.iter().max().unwrap() + 1;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let cen: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let rows: Vec<&Vec<f64>> = x.iter().zip(y).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    let s: Vec<f64> = (0..k)
        .map(|c| {
            let rows: Vec<&Vec<f64>> = x.iter().zip(y).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            rows.iter().map(|r| dist(r, &cen[c])).sum::<f64>() / rows.len() as f64
        })
        .collect();
    (0..k)
        .map(|i| (0..k).filter(|&j| j != i).map(|j| (s[i] + s[j]) / dist(&cen[i], &cen[j])).fold(0.0, f64::max))
        .sum::<f64>()
        / k as f64
}

#[test]
fn chi_and_dbi_match_textbook_formulas() {
    for seed in 0..20 {
        let mut rng = rng::from_seed(seed);
        let k = rng.random_range(2..6);
        let centers = gaussian(k, 5, &mut rng) * 2.0;
        let (x, y) = clouds(&centers, rng.random_range(3..12), 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = x.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        let (c, tc) = (chi(x.view(), &y).unwrap(), textbook_chi(&rows, &y));
        let (d, td) = (dbi(x.view(), &y).unwrap(), textbook_dbi(&rows, &y));
        assert!((c - tc).abs() <= 1e-9 * tc.abs(), "chi {c} vs {tc}");
        assert!((d - td).abs() <= 1e-9 * td.abs(), "dbi {d} vs {td}");
    }
}

#[test]
fn cluster_indices_reward_separation() {
    let mut rng = rng::from_seed(12);
    let unit = array![[0.0, 0.0], [1.0, 0.0]];
    let (noise, y) = clouds(&Array2::zeros((2, 2)), 20, 0.5, &mut rng);
    let place = |gap: f64| {
        let mut x = noise.clone();
        for (mut row, &c) in x.axis_iter_mut(Axis(0)).zip(&y) {
            row.scaled_add(gap, &unit.row(c));
        }
        x
    };
    let (tight, overlap) = (place(10.0), place(0.5));
    assert!(chi(tight.view(), &y).unwrap() > chi(overlap.view(), &y).unwrap());
    assert!(dbi(place(6.0).view(), &y).unwrap() < dbi(place(3.0).view(), &y).unwrap());
}

#[test]
fn checkpoint_file_round_trip_and_guide_init() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.tlck");
    let cfg = EncoderConfig { input_dim: 6, hidden_dims: vec![8], embed_dim: 4, seed: 3, ..EncoderConfig::default() };
    let f = Encoder::new(cfg).unwrap();
    save_checkpoint(&Checkpoint::new(f.clone()), &path).unwrap();
    let g = load_checkpoint(&path).unwrap().encoder;
    let x = gaussian(10, 6, &mut rng::from_seed(1));
    assert_eq!(f.embed(x.view()).unwrap(), g.embed(x.view()).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn dataset_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tlss");
    let spec = LongTailSpec { max_per_class: 20, imbalance_ratio: 4.0, ..LongTailSpec::default() };
    let ds = synthdata::gen_longtail(&spec).unwrap();
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Truncated(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, bad).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::MalformedHeader(_))));
    assert!(matches!(load_dataset(dir.path().join("missing.tlss")), Err(Error::Io { .. })));
}
