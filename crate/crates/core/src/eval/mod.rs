//! Frozen-encoder evaluation: linear probes, group accuracies and cluster
//! quality indices.

pub mod metrics;
pub mod probe;

pub use metrics::{adjusted_rand_index, chi, dbi};
pub use probe::{train_probe, train_probe_on_embeddings, ProbeConfig, ProbeModel};

use std::fmt;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::synthdata::Dataset;

/// Many / Medium / Few class groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSplit {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

/// Sort classes by descending training count (ties by class index) and cut
/// into contiguous tertiles of sizes `ceil(C/3)`, `ceil(R/2)`, `R - ceil(R/2)`
/// where `R` is what remains after the first group.
pub fn group_split(class_counts: &[usize]) -> Result<GroupSplit> {
    let c = class_counts.len();
    if c < 3 {
        return Err(Error::config(format!("group split needs at least 3 classes, got {c}")));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
    let n_many = c.div_ceil(3);
    let rest = c - n_many;
    let n_medium = rest.div_ceil(2);
    Ok(GroupSplit {
        many: order[..n_many].to_vec(),
        medium: order[n_many..n_many + n_medium].to_vec(),
        few: order[n_many + n_medium..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_many: f64,
    pub acc_medium: f64,
    pub acc_few: f64,
    /// Population standard deviation of the three group accuracies.
    pub std_groups: f64,
    pub acc_all: f64,
    pub chi: f64,
    pub dbi: f64,
}

pub const METRICS_HEADER: &str = "many,medium,few,std,all,chi,dbi";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.acc_many, self.acc_medium, self.acc_few, self.std_groups, self.acc_all, self.chi, self.dbi
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, format!("{METRICS_HEADER}\n{}\n", self.csv_row())).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Many   {:>8.2}", self.acc_many)?;
        writeln!(f, "Medium {:>8.2}", self.acc_medium)?;
        writeln!(f, "Few    {:>8.2}", self.acc_few)?;
        writeln!(f, "STD    {:>8.2}", self.std_groups)?;
        writeln!(f, "All    {:>8.2}", self.acc_all)?;
        writeln!(f, "CHI    {:>8.2}", self.chi)?;
        write!(f, "DBI    {:>8.4}", self.dbi)
    }
}

pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Metrics from test embeddings and true labels.
pub fn report_from_embeddings(
    probe: &ProbeModel,
    emb: ArrayView2<'_, f64>,
    labels: &[usize],
    split: &GroupSplit,
) -> Result<MetricsReport> {
    if emb.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: emb.nrows(), got: labels.len() });
    }
    let preds = probe.predict(emb)?;
    let n_classes = probe.n_classes();
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&y, &p) in labels.iter().zip(&preds) {
        if y >= n_classes {
            return Err(Error::Format(format!("test label {y} outside {n_classes} classes")));
        }
        totals[y] += 1;
        if y == p {
            hits[y] += 1;
        }
    }
    let group_acc = |classes: &[usize]| -> Result<f64> {
        let mut sum = 0.0;
        for &c in classes {
            if c >= n_classes || totals[c] == 0 {
                return Err(Error::Insufficient(format!("test set has no samples of class {c}")));
            }
            sum += 100.0 * hits[c] as f64 / totals[c] as f64;
        }
        Ok(sum / classes.len() as f64)
    };
    let acc_many = group_acc(&split.many)?;
    let acc_medium = group_acc(&split.medium)?;
    let acc_few = group_acc(&split.few)?;
    let acc_all = 100.0 * hits.iter().sum::<usize>() as f64 / labels.len().max(1) as f64;
    Ok(MetricsReport {
        acc_many,
        acc_medium,
        acc_few,
        std_groups: population_std(&[acc_many, acc_medium, acc_few]),
        acc_all,
        chi: chi(emb, labels)?,
        dbi: dbi(emb, labels)?,
    })
}

/// Embed the test set with the frozen encoder and score the probe on it.
pub fn report(probe: &ProbeModel, encoder: &Encoder, test: &Dataset, split: &GroupSplit) -> Result<MetricsReport> {
    let emb = encoder.embed(test.features_f64().view())?;
    let labels = test.require_labels()?;
    report_from_embeddings(probe, emb.view(), &labels, split)
}
