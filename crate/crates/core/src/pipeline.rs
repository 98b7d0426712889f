//! Stage orchestration shared by the CLI and the end-to-end tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::distill::{self, DistillOutput};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::{self, GroupSplit, MetricsReport, METRICS_HEADER};
use crate::pretrain::{self, PretrainOutput, StageOneConfig};
use crate::synthdata::{self, Dataset};

pub struct Data {
    pub train: Dataset,
    pub ood: Dataset,
    pub test: Dataset,
}

pub fn generate(cfg: &RunConfig) -> Result<Data> {
    let train = synthdata::gen_longtail(&cfg.data)?;
    let ood = synthdata::gen_ood(&cfg.ood, &cfg.data)?;
    let test = synthdata::gen_balanced(&cfg.data, cfg.eval.test_per_class, cfg.test_seed())?;
    Ok(Data { train, ood, test })
}

pub fn pretrain(stage: &StageOneConfig, train: &Dataset, ood: Option<&Dataset>) -> Result<PretrainOutput> {
    pretrain::run_pretrain(train, ood, stage)
}

pub fn distill(cfg: &RunConfig, f: &Encoder, train: &Dataset) -> Result<DistillOutput> {
    distill::run_distill(f, train, &cfg.distill, &cfg.cluster)
}

/// Fit a probe on the labeled training split and score it on the test split.
pub fn evaluate(cfg: &RunConfig, enc: &Encoder, train: &Dataset, test: &Dataset, few_shot: bool) -> Result<MetricsReport> {
    let n_classes = cfg.data.n_classes;
    let counts = train.class_counts();
    if counts.len() > n_classes {
        return Err(Error::Format(format!("training labels exceed {n_classes} classes")));
    }
    let mut padded = counts;
    padded.resize(n_classes, 0);
    let split: GroupSplit = eval::group_split(&padded)?;
    let probe = eval::train_probe(enc, train, n_classes, &cfg.eval.probe(few_shot, cfg.probe_seed()))?;
    eval::report(&probe, enc, test, &split)
}

/// Results of `run_all`.
pub struct Summary {
    pub baseline: MetricsReport,
    /// Stage 1 of the full method without stage 2.
    pub stage_one: MetricsReport,
    pub full: MetricsReport,
}

/// File names written by `run_all` under the output directory.
pub mod files {
    pub const ID_TRAIN: &str = "id_train.tlss";
    pub const ID_TEST: &str = "id_test.tlss";
    pub const OOD: &str = "ood.tlss";
    pub const BASELINE_CKPT: &str = "baseline.tlck";
    pub const BASELINE_LOG: &str = "baseline_pretrain_log.csv";
    pub const BASELINE_METRICS: &str = "baseline_metrics.csv";
    pub const F_CKPT: &str = "f.tlck";
    pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
    pub const STAGE_ONE_METRICS: &str = "stage1_metrics.csv";
    pub const G_CKPT: &str = "g.tlck";
    pub const DISTILL_LOG: &str = "distill_log.csv";
    pub const METRICS: &str = "metrics.csv";
    pub const METRICS_TXT: &str = "metrics.txt";
    pub const COMPARISON: &str = "comparison.csv";
    pub const COMPARISON_TXT: &str = "comparison.txt";
}

pub fn comparison_csv(baseline: &MetricsReport, full: &MetricsReport) -> String {
    format!("method,{METRICS_HEADER}\nbaseline,{}\nfull,{}\n", baseline.csv_row(), full.csv_row())
}

pub fn comparison_text(baseline: &MetricsReport, full: &MetricsReport) -> String {
    let mut s = format!(
        "{:<10}{:>8}{:>8}{:>8}{:>8}{:>8}{:>10}{:>8}\n",
        "method", "Many", "Medium", "Few", "STD", "All", "CHI", "DBI"
    );
    for (name, r) in [("baseline", baseline), ("full", full)] {
        writeln!(
            s,
            "{:<10}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>10.2}{:>8.3}",
            name, r.acc_many, r.acc_medium, r.acc_few, r.std_groups, r.acc_all, r.chi, r.dbi
        )
        .expect("string write");
    }
    s
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Data generation, baseline arm, full method (both stages) and the
/// comparison table, all written under `out`.
pub fn run_all(cfg: &RunConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<Summary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = generate(cfg)?;
    synthdata::save_dataset(&data.train, out.join(files::ID_TRAIN))?;
    synthdata::save_dataset(&data.test, out.join(files::ID_TEST))?;
    synthdata::save_dataset(&data.ood, out.join(files::OOD))?;
    progress(&format!("data: {} ID train, {} ID test, {} OOD", data.train.len(), data.test.len(), data.ood.len()));

    let base = pretrain(&cfg.baseline_stage_one(), &data.train, None)?;
    pretrain::write_pretrain_log(out.join(files::BASELINE_LOG), &base.log)?;
    save_checkpoint(
        &Checkpoint { encoder: base.encoder.clone(), velocity: Some(base.velocity.clone()), cluster: None },
        out.join(files::BASELINE_CKPT),
    )?;
    let baseline = evaluate(cfg, &base.encoder, &data.train, &data.test, false)?;
    baseline.write_csv(out.join(files::BASELINE_METRICS))?;
    progress(&format!("baseline: all {:.2}, std {:.2}", baseline.acc_all, baseline.std_groups));

    let s1 = pretrain(&cfg.stage_one(), &data.train, Some(&data.ood))?;
    pretrain::write_pretrain_log(out.join(files::PRETRAIN_LOG), &s1.log)?;
    save_checkpoint(
        &Checkpoint { encoder: s1.encoder.clone(), velocity: Some(s1.velocity.clone()), cluster: None },
        out.join(files::F_CKPT),
    )?;
    let stage_one = evaluate(cfg, &s1.encoder, &data.train, &data.test, false)?;
    stage_one.write_csv(out.join(files::STAGE_ONE_METRICS))?;
    progress(&format!("stage 1: all {:.2}, std {:.2}", stage_one.acc_all, stage_one.std_groups));

    let s2 = distill(cfg, &s1.encoder, &data.train)?;
    distill::write_distill_log(out.join(files::DISTILL_LOG), &s2.log)?;
    let clusters = s2.index.clusters.clone();
    save_checkpoint(
        &Checkpoint { encoder: s2.encoder.clone(), velocity: None, cluster: Some(clusters) },
        out.join(files::G_CKPT),
    )?;
    let full = evaluate(cfg, &s2.encoder, &data.train, &data.test, false)?;
    full.write_csv(out.join(files::METRICS))?;
    write(out.join(files::METRICS_TXT), &format!("{full}\n"))?;
    progress(&format!("full: all {:.2}, std {:.2}", full.acc_all, full.std_groups));

    write(out.join(files::COMPARISON), &comparison_csv(&baseline, &full))?;
    write(out.join(files::COMPARISON_TXT), &comparison_text(&baseline, &full))?;
    Ok(Summary { baseline, stage_one, full })
}
