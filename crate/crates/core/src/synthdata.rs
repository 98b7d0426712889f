//! Synthetic long-tailed Gaussian-mixture data, OOD pools, and the `TLSS`
//! dataset file format.
//!
//! Binary layout (little-endian):
//!
//! | field    | type              |
//! |----------|-------------------|
//! | magic    | `b"TLSS"`         |
//! | version  | u16 = 1           |
//! | flags    | u16, bit 0 = labels present |
//! | count    | u64               |
//! | dim      | u32               |
//! | domains  | u8 × count (0 = ID, 1 = OOD) |
//! | features | f32 × count × dim, row-major |
//! | labels   | u32 × count, only when flagged; `u32::MAX` marks a missing label |

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"TLSS";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 8 + 4;
const MISSING_LABEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Id,
    Ood,
}

impl Domain {
    fn tag(self) -> u8 {
        match self {
            Domain::Id => 0,
            Domain::Ood => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Domain::Id),
            1 => Some(Domain::Ood),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f32>,
    pub domain: Domain,
    /// Ground-truth class; only used for generation and evaluation.
    pub class_label: Option<u32>,
}

/// Ordered samples of a common dimension. Row `i` of `features` is sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f32>,
    domains: Vec<Domain>,
    labels: Vec<Option<u32>>,
}

impl Dataset {
    pub fn new(features: Array2<f32>, domains: Vec<Domain>, labels: Vec<Option<u32>>) -> Result<Self> {
        let n = features.nrows();
        if domains.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: domains.len() });
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: labels.len() });
        }
        if features.ncols() == 0 {
            return Err(Error::config("dataset dimension must be positive"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Ok(Self { features, domains, labels })
    }

    pub fn from_samples(dim: usize, samples: &[Sample]) -> Result<Self> {
        let mut features = Array2::zeros((samples.len(), dim));
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: s.features.len() });
            }
            features.row_mut(i).assign(&ArrayView1::from(&s.features[..]));
        }
        Self::new(
            features,
            samples.iter().map(|s| s.domain).collect(),
            samples.iter().map(|s| s.class_label).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            features: self.features.row(i).to_vec(),
            domain: self.domains[i],
            class_label: self.labels[i],
        }
    }

    /// Labels as class indices; errors if any sample is unlabeled.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(|v| v as usize).ok_or_else(|| Error::Format(format!("sample {i} has no class label"))))
            .collect()
    }

    /// Number of samples per class label, indexed by label (length = max label + 1).
    pub fn class_counts(&self) -> Vec<usize> {
        let max = self.labels.iter().flatten().copied().max();
        let mut counts = vec![0; max.map_or(0, |m| m as usize + 1)];
        for l in self.labels.iter().flatten() {
            counts[*l as usize] += 1;
        }
        counts
    }

    /// Samples `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Array2::zeros((idx.len(), self.dim()));
        for (r, &i) in idx.iter().enumerate() {
            features.row_mut(r).assign(&self.features.row(i));
        }
        Dataset {
            features,
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Parameters of a long-tailed Gaussian-mixture ID dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongTailSpec {
    pub n_classes: usize,
    pub max_per_class: usize,
    /// Ratio between the largest and the smallest class count (1 = balanced).
    pub imbalance_ratio: f64,
    pub dim: usize,
    /// Euclidean distance between any two class means.
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            max_per_class: 500,
            imbalance_ratio: 100.0,
            dim: 16,
            class_separation: 6.5,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive"));
        }
        if self.max_per_class == 0 {
            return Err(Error::config("max_per_class must be positive"));
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return Err(Error::config("imbalance_ratio must be a finite value >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return Err(Error::config("class_separation must be positive"));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma must be positive"));
        }
        class_counts(self).map(|_| ())
    }
}

/// `n_c = round(n_max * r^(-c/(C-1)))`, rounding halves up.
pub fn class_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    let c_total = spec.n_classes;
    (0..c_total)
        .map(|c| {
            let exponent = if c_total > 1 { -(c as f64) / (c_total - 1) as f64 } else { 0.0 };
            let raw = spec.max_per_class as f64 * spec.imbalance_ratio.powf(exponent);
            let n = (raw + 0.5).floor() as usize;
            if n == 0 {
                Err(Error::config(format!("class {c} would receive 0 samples ({raw:.4} before rounding)")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Class means: pairwise distance exactly `class_separation` when
/// `n_classes <= dim` (scaled random orthonormal frame). With more classes than
/// dimensions the means are random directions at the same radius and the
/// separation holds only approximately.
pub fn class_means(spec: &LongTailSpec) -> Array2<f64> {
    let mut rng = rng::stream(spec.seed, "class-means");
    let (c, d) = (spec.n_classes, spec.dim);
    let radius = spec.class_separation / std::f64::consts::SQRT_2;
    let mut means = Array2::<f64>::zeros((c, d));
    for k in 0..c {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if k < d {
                for j in 0..k {
                    let prev = means.row(j);
                    let proj: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                    for (vi, pi) in v.iter_mut().zip(prev.iter()) {
                        *vi -= proj * pi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (dst, x) in means.row_mut(k).iter_mut().zip(v) {
                    *dst = x / norm;
                }
                break;
            }
        }
    }
    means.mapv_inplace(|x| x * radius);
    means
}

fn gaussian_rows(
    centers: &Array2<f64>,
    components: &[usize],
    sigma: f64,
    rng: &mut rng::Rng,
) -> Array2<f32> {
    let d = centers.ncols();
    let mut out = Array2::<f32>::zeros((components.len(), d));
    for (i, &comp) in components.iter().enumerate() {
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            out[[i, j]] = (centers[[comp, j]] + sigma * e) as f32;
        }
    }
    out
}

fn labeled_mixture(spec: &LongTailSpec, counts: &[usize], rng: &mut rng::Rng) -> Result<Dataset> {
    let means = class_means(spec);
    let components: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let features = gaussian_rows(&means, &components, spec.noise_sigma, rng);
    let n = components.len();
    Dataset::new(
        features,
        vec![Domain::Id; n],
        components.iter().map(|&c| Some(c as u32)).collect(),
    )
}

/// Long-tailed ID training set; samples are ordered by class.
pub fn gen_longtail(spec: &LongTailSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = class_counts(spec)?;
    let mut rng = rng::stream(spec.seed, "longtail-samples");
    labeled_mixture(spec, &counts, &mut rng)
}

/// Balanced ID split drawn from the same class means as `gen_longtail(spec)`.
pub fn gen_balanced(spec: &LongTailSpec, per_class: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if per_class == 0 {
        return Err(Error::config("per_class must be positive"));
    }
    let counts = vec![per_class; spec.n_classes];
    let mut rng = rng::stream(seed, "balanced-samples");
    labeled_mixture(spec, &counts, &mut rng)
}

/// Parameters of an unlabeled OOD pool placed around an ID mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSpec {
    pub n: usize,
    /// Pairwise midpoints of ID class means are scaled by this factor.
    pub outward_factor: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for OodSpec {
    fn default() -> Self {
        Self { n: 5000, outward_factor: 1.5, noise_sigma: 1.0, seed: 1 }
    }
}

impl OodSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("OOD pool size must be at least 1"));
        }
        if !(self.outward_factor > 0.0) || !self.outward_factor.is_finite() {
            return Err(Error::config("outward_factor must be positive"));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("OOD noise_sigma must be positive"));
        }
        Ok(())
    }
}

/// Component means of the OOD mixture: `outward_factor * (mu_a + mu_b) / 2`
/// for every class pair (or the scaled single mean when there is one class).
pub fn ood_means(id: &LongTailSpec, factor: f64) -> Array2<f64> {
    let means = class_means(id);
    let c = means.nrows();
    if c == 1 {
        return means.mapv(|x| x * factor);
    }
    let mut out = Array2::zeros((c * (c - 1) / 2, means.ncols()));
    let mut r = 0;
    for a in 0..c {
        for b in (a + 1)..c {
            let mid = (&means.row(a) + &means.row(b)) * (0.5 * factor);
            out.row_mut(r).assign(&mid);
            r += 1;
        }
    }
    out
}

/// Unlabeled OOD pool of `ood.n` samples around the ID geometry of `id`.
pub fn gen_ood(ood: &OodSpec, id: &LongTailSpec) -> Result<Dataset> {
    ood.validate()?;
    id.validate()?;
    let centers = ood_means(id, ood.outward_factor);
    let mut rng = rng::stream(ood.seed, "ood-samples");
    let components: Vec<usize> = (0..ood.n).map(|_| rng.random_range(0..centers.nrows())).collect();
    let features = gaussian_rows(&centers, &components, ood.noise_sigma, &mut rng);
    Dataset::new(features, vec![Domain::Ood; ood.n], vec![None; ood.n])
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let n = ds.len();
    let d = ds.dim();
    let has_labels = ds.labels.iter().any(Option::is_some);
    let mut buf = Vec::with_capacity(HEADER_LEN + n + 4 * n * d + if has_labels { 4 * n } else { 0 });
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(if has_labels { FLAG_LABELS } else { 0 }).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend(ds.domains.iter().map(|d| d.tag()));
    for v in ds.features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if has_labels {
        for l in &ds.labels {
            buf.extend_from_slice(&l.unwrap_or(MISSING_LABEL).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::MalformedHeader("bad magic bytes".into()));
        }
        return Err(Error::Truncated(format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::MalformedHeader(format!("unknown flag bits {flags:#06x}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    if dim == 0 {
        return Err(Error::MalformedHeader("dimension is zero".into()));
    }
    let n = usize::try_from(count).map_err(|_| Error::MalformedHeader("count overflows".into()))?;
    let mut r = Reader { buf: bytes, pos: HEADER_LEN };

    let domains = r
        .take(n, "domain tags")?
        .iter()
        .enumerate()
        .map(|(i, &t)| Domain::from_tag(t).ok_or_else(|| Error::Format(format!("sample {i}: domain tag {t}"))))
        .collect::<Result<Vec<_>>>()?;
    let feature_bytes = n
        .checked_mul(dim)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader("count × dim overflows".into()))?;
    let raw = r.take(feature_bytes, "features")?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let features = Array2::from_shape_vec((n, dim), values).expect("length checked");
    let labels = if flags & FLAG_LABELS != 0 {
        r.take(4 * n, "labels")?
            .chunks_exact(4)
            .map(|c| {
                let v = u32::from_le_bytes(c.try_into().expect("4 bytes"));
                (v != MISSING_LABEL).then_some(v)
            })
            .collect()
    } else {
        vec![None; n]
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
    }
    Dataset::new(features, domains, labels)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Load and check that the samples have dimension `dim`.
pub fn load_dataset_with_dim(path: impl AsRef<Path>, dim: usize) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if ds.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: ds.dim() });
    }
    Ok(ds)
}

/// Write a dataset as CSV: header `f0..f{D-1},label,domain`.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    header.push("domain".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].map(|l| l.to_string()).unwrap_or_default());
        rec.push(match ds.domains[i] {
            Domain::Id => "ID".into(),
            Domain::Ood => "OOD".into(),
        });
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Read a CSV with a header row. Every column is a feature except optional
/// trailing columns named `label` and `domain` (`ID`/`OOD` or `0`/`1`).
/// Samples without a domain column are ID.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let mut dim = header.len();
    let mut domain_col = None;
    let mut label_col = None;
    if dim > 0 && header[dim - 1] == "domain" {
        dim -= 1;
        domain_col = Some(dim);
    }
    if dim > 0 && header[dim - 1] == "label" {
        dim -= 1;
        label_col = Some(dim);
    }
    if dim == 0 {
        return Err(Error::Format(format!("{}: no feature columns", path.display())));
    }
    let mut samples = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != header.len() {
            return Err(Error::DimensionMismatch { expected: header.len(), got: rec.len() });
        }
        let features = (0..dim)
            .map(|j| {
                rec[j]
                    .trim()
                    .parse::<f32>()
                    .map_err(|e| Error::Format(format!("row {row}, column {j}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let class_label = match label_col.map(|c| rec[c].trim()) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<u32>().map_err(|e| Error::Format(format!("row {row}, label: {e}")))?),
        };
        let domain = match domain_col.map(|c| rec[c].trim().to_ascii_uppercase()) {
            None => Domain::Id,
            Some(s) if s == "ID" || s == "0" => Domain::Id,
            Some(s) if s == "OOD" || s == "1" => Domain::Ood,
            Some(s) => return Err(Error::Format(format!("row {row}: unknown domain {s:?}"))),
        };
        samples.push(Sample { features, domain, class_label });
    }
    Dataset::from_samples(dim, &samples)
}
