//! Training contracts of both stages and the end-to-end driver.

use tlss_core::cluster::ClusterConfig;
use tlss_core::config::RunConfig;
use tlss_core::distill::{run_distill, DistillConfig};
use tlss_core::pipeline::{self, files};
use tlss_core::pretrain::run_pretrain;
use tlss_core::synthdata::{gen_longtail, gen_ood};
use tlss_core::{Encoder, LongTailSpec};

fn tiny_config(seed: u64) -> RunConfig {
    let json = r#"{
        "data": {"n_classes": 4, "max_per_class": 60, "imbalance_ratio": 10.0, "dim": 8},
        "ood": {"n": 300},
        "encoder": {"hidden_dims": [16], "embed_dim": 8},
        "cluster": {"n_clusters": 4},
        "tailness": {"k": 5},
        "pretrain": {"epochs": 6, "refresh_period": 3, "batch_size": 32},
        "distill": {"epochs": 3, "batch_size": 32},
        "eval": {"test_per_class": 20, "linear_epochs": 10}
    }"#;
    RunConfig::from_json(json).unwrap().with_seed(seed)
}

/// Two classes, head and tail.
fn head_tail(seed: u64) -> RunConfig {
    let mut cfg = tiny_config(seed);
    cfg.data = LongTailSpec { n_classes: 2, max_per_class: 200, imbalance_ratio: 10.0, dim: 8, ..cfg.data };
    cfg.cluster.n_clusters = 2;
    cfg.pretrain.epochs = 50;
    cfg.pretrain.refresh_period = 10;
    cfg.derive_seeds();
    cfg
}

#[test]
fn stage_one_loss_decreases() {
    for seed in 0..3 {
        let cfg = head_tail(seed);
        let train = gen_longtail(&cfg.data).unwrap();
        let pool = gen_ood(&cfg.ood, &cfg.data).unwrap();
        let out = run_pretrain(&train, Some(&pool), &cfg.stage_one()).unwrap();
        assert_eq!(out.log.len(), 50);
        let (first, last) = (out.log[0].l_cpt, out.log[49].l_cpt);
        assert!(last < first, "seed {seed}: {first} -> {last}");
        assert!(out.log.iter().all(|r| r.n_ood_sampled == cfg.tailness.budget_for_pool(cfg.ood.n)));
    }
}

#[test]
fn stage_one_zero_epochs_keeps_init() {
    let mut cfg = tiny_config(1);
    cfg.pretrain.epochs = 0;
    let train = gen_longtail(&cfg.data).unwrap();
    let out = run_pretrain(&train, None, &cfg.baseline_stage_one()).unwrap();
    assert_eq!(out.encoder, Encoder::new(cfg.encoder.clone()).unwrap());
    assert!(out.log.is_empty());
}

#[test]
fn stage_one_is_deterministic() {
    let cfg = tiny_config(2);
    let train = gen_longtail(&cfg.data).unwrap();
    let pool = gen_ood(&cfg.ood, &cfg.data).unwrap();
    let a = run_pretrain(&train, Some(&pool), &cfg.stage_one()).unwrap();
    let b = run_pretrain(&train, Some(&pool), &cfg.stage_one()).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.log, b.log);
    assert_eq!(a.ood_selected, b.ood_selected);
}

#[test]
fn baseline_uses_no_ood() {
    let cfg = tiny_config(3);
    let train = gen_longtail(&cfg.data).unwrap();
    let out = run_pretrain(&train, None, &cfg.baseline_stage_one()).unwrap();
    assert!(out.log.iter().all(|r| r.n_ood_sampled == 0 && r.l_dd == 0.0));
    assert!(out.ood_selected.is_empty());
}

fn trained_f(cfg: &RunConfig) -> (Encoder, tlss_core::Dataset) {
    let train = gen_longtail(&cfg.data).unwrap();
    let pool = gen_ood(&cfg.ood, &cfg.data).unwrap();
    (run_pretrain(&train, Some(&pool), &cfg.stage_one()).unwrap().encoder, train)
}

#[test]
fn stage_two_zero_epochs_copies_f() {
    let cfg = tiny_config(4);
    let (f, train) = trained_f(&cfg);
    let dcfg = DistillConfig { epochs: 0, ..cfg.distill.clone() };
    let out = run_distill(&f, &train, &dcfg, &cfg.cluster).unwrap();
    assert_eq!(out.encoder, f);
    let x = train.features_f64();
    assert_eq!(out.encoder.embed(x.view()).unwrap(), f.embed(x.view()).unwrap());
}

#[test]
fn stage_two_loss_decreases_and_f_is_untouched() {
    let cfg = tiny_config(5);
    let (f, train) = trained_f(&cfg);
    let before = f.clone();
    let dcfg = DistillConfig { epochs: 15, ..cfg.distill.clone() };
    let out = run_distill(&f, &train, &dcfg, &cfg.cluster).unwrap();
    assert_eq!(f, before);
    assert_ne!(out.encoder, f);
    let (first, last) = (out.log[0].l_gl, out.log.last().unwrap().l_gl);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn stage_two_needs_two_clusters() {
    let cfg = tiny_config(6);
    let (f, train) = trained_f(&cfg);
    let one = ClusterConfig { n_clusters: 1, ..cfg.cluster.clone() };
    assert!(run_distill(&f, &train, &cfg.distill, &one).is_err());
}

#[test]
fn run_all_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let s = pipeline::run_all(&tiny_config(7), dir.path(), &mut |m| lines.push(m.to_string())).unwrap();
    for name in [
        files::ID_TRAIN,
        files::ID_TEST,
        files::OOD,
        files::BASELINE_CKPT,
        files::F_CKPT,
        files::G_CKPT,
        files::PRETRAIN_LOG,
        files::DISTILL_LOG,
        files::METRICS,
        files::METRICS_TXT,
        files::COMPARISON,
        files::COMPARISON_TXT,
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let table = std::fs::read_to_string(dir.path().join(files::COMPARISON)).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("baseline,") && rows[2].starts_with("full,"));
    assert!(rows.iter().all(|r| r.split(',').count() == 8));
    let log = std::fs::read_to_string(dir.path().join(files::PRETRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
    assert!(s.full.acc_all.is_finite() && s.baseline.acc_all.is_finite());
    assert_eq!(lines.len(), 4);
}
