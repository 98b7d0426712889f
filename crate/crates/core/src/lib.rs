//! Self-supervised representation learning for long-tailed data.
//!
//! Stage 1 pretrains an MLP encoder contrastively, mixing in auxiliary
//! out-of-distribution samples picked near sparse (tail-like) clusters of the
//! in-domain embedding. Stage 2 distills the pretrained encoder into a copy of
//! itself with guided positives and negatives. The `eval` module measures the
//! result with linear probes and cluster-quality indices.

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod knn;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod synthdata;
pub mod tailness;

pub use config::RunConfig;
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use synthdata::{Dataset, Domain, LongTailSpec, OodSpec};
