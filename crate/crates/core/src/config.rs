//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterConfig;
use crate::distill::DistillConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::pretrain::{PretrainConfig, StageOneConfig};
use crate::rng;
use crate::synthdata::{LongTailSpec, OodSpec};
use crate::tailness::TailnessConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Balanced held-out test samples per class.
    pub test_per_class: usize,
    pub linear_epochs: usize,
    pub few_shot_epochs: usize,
    pub few_shot_fraction: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            test_per_class: 100,
            linear_epochs: 30,
            few_shot_epochs: 100,
            few_shot_fraction: 0.01,
            lr: p.lr,
            momentum: p.momentum,
            batch_size: p.batch_size,
        }
    }
}

impl EvalConfig {
    pub fn probe(&self, few_shot: bool, seed: u64) -> ProbeConfig {
        let (label_fraction, epochs) =
            if few_shot { (self.few_shot_fraction, self.few_shot_epochs) } else { (1.0, self.linear_epochs) };
        ProbeConfig { label_fraction, epochs, lr: self.lr, momentum: self.momentum, batch_size: self.batch_size, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.test_per_class == 0 {
            return Err(Error::config("test_per_class must be positive"));
        }
        self.probe(false, 0).validate()?;
        self.probe(true, 0).validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out") }
    }
}

/// Every hyperparameter of a run. Per-module `seed` fields are ignored on
/// input and re-derived from the global `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: LongTailSpec,
    pub ood: OodSpec,
    pub encoder: EncoderConfig,
    pub cluster: ClusterConfig,
    pub tailness: TailnessConfig,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            data: LongTailSpec::default(),
            ood: OodSpec::default(),
            encoder: EncoderConfig::default(),
            cluster: ClusterConfig::default(),
            tailness: TailnessConfig::default(),
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Replace the global seed and everything derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.derive_seeds();
        self
    }

    /// Fill per-module seeds from the global seed, one named stream each,
    /// and tie the encoder input width to the data.
    pub fn derive_seeds(&mut self) {
        let s = self.seed;
        self.data.seed = rng::derive_seed(s, rng::DATA);
        self.ood.seed = rng::derive_seed(s, &format!("{}-ood", rng::DATA));
        self.encoder.seed = rng::derive_seed(s, rng::INIT);
        self.pretrain.seed = rng::derive_seed(s, "stage-one");
        self.distill.seed = rng::derive_seed(s, "stage-two");
        self.encoder.input_dim = self.data.dim;
    }

    pub fn test_seed(&self) -> u64 {
        rng::derive_seed(self.seed, &format!("{}-test", rng::DATA))
    }

    pub fn probe_seed(&self) -> u64 {
        rng::derive_seed(self.seed, rng::PROBE)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.ood.validate()?;
        self.encoder.validate()?;
        self.cluster.validate()?;
        self.tailness.validate()?;
        self.pretrain.validate()?;
        self.distill.validate()?;
        self.eval.validate()?;
        if self.encoder.input_dim != self.data.dim {
            return Err(Error::config("encoder input_dim must equal data dim"));
        }
        if self.data.n_classes < 3 {
            return Err(Error::config("evaluation groups need at least 3 classes"));
        }
        if self.cluster.n_clusters < 2 {
            return Err(Error::config("stage 2 needs at least 2 clusters"));
        }
        if self.pretrain.alpha > 0.0 && self.tailness.budget_for_pool(self.ood.n) < 2 {
            return Err(Error::config("alpha > 0 needs an OOD budget of at least 2"));
        }
        if self.tailness.budget_for_pool(self.ood.n) > self.ood.n {
            return Err(Error::config(format!(
                "OOD budget {} exceeds the pool size {}",
                self.tailness.budget_for_pool(self.ood.n),
                self.ood.n
            )));
        }
        Ok(())
    }

    pub fn stage_one(&self) -> StageOneConfig {
        StageOneConfig {
            encoder: self.encoder.clone(),
            cluster: self.cluster.clone(),
            tailness: self.tailness.clone(),
            pretrain: self.pretrain.clone(),
        }
    }

    /// The instance-discrimination control: no neighbour positives, no
    /// domain loss, no OOD. Same initialization and batching streams.
    pub fn baseline_stage_one(&self) -> StageOneConfig {
        let mut s = self.stage_one();
        s.pretrain.k_pos = 0;
        s.pretrain.alpha = 0.0;
        s
    }
}
