//! `TLCK` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      b"TLCK"
//! version    u16 = 1
//! input_dim  u32
//! n_hidden   u32, then n_hidden × u32 widths
//! embed_dim  u32
//! activation u8 (0 = relu, 1 = tanh)
//! seed       u64
//! params     f64 tensors in declaration order (layer weights row-major, then bias)
//! velocity   u8 flag, then the same tensors when set
//! cluster    u8 flag, then n_clusters u32, dim u32, centroids f64,
//!            count u64, assignments u32 × count
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::cluster::ClusterModel;
use crate::encoder::{Activation, Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TLCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    /// Optimizer momentum buffers.
    pub velocity: Option<EncoderParams>,
    pub cluster: Option<ClusterModel>,
}

impl Checkpoint {
    pub fn new(encoder: Encoder) -> Self {
        Self { encoder, velocity: None, cluster: None }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_params(buf: &mut Vec<u8>, p: &EncoderParams) {
    for v in p.to_flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = &ck.encoder.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, cfg.input_dim)?;
    put_u32(&mut buf, cfg.hidden_dims.len())?;
    for &h in &cfg.hidden_dims {
        put_u32(&mut buf, h)?;
    }
    put_u32(&mut buf, cfg.embed_dim)?;
    buf.push(match cfg.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    put_params(&mut buf, &ck.encoder.params);
    match &ck.velocity {
        Some(v) => {
            if v.num_params() != ck.encoder.params.num_params() {
                return Err(Error::DimensionMismatch { expected: ck.encoder.params.num_params(), got: v.num_params() });
            }
            buf.push(1);
            put_params(&mut buf, v);
        }
        None => buf.push(0),
    }
    match &ck.cluster {
        Some(m) => {
            buf.push(1);
            put_u32(&mut buf, m.centroids.nrows())?;
            put_u32(&mut buf, m.centroids.ncols())?;
            for v in m.centroids.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(m.assignments.len() as u64).to_le_bytes());
            for &a in &m.assignments {
                put_u32(&mut buf, a)?;
            }
        }
        None => buf.push(0),
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends at byte {}, needed {n} more at {}", self.buf.len(), self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::MalformedHeader("tensor size overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn params(&mut self, cfg: &EncoderConfig) -> Result<EncoderParams> {
        let mut p = EncoderParams::zeros(cfg);
        let values = self.f64s(p.num_params())?;
        p.set_flat(&values)?;
        Ok(p)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::MalformedHeader("not a TLCK checkpoint".into()));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported checkpoint version {version}")));
    }
    let input_dim = c.u32()?;
    let n_hidden = c.u32()?;
    if n_hidden > 1024 {
        return Err(Error::MalformedHeader(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden_dims = (0..n_hidden).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let embed_dim = c.u32()?;
    let activation = match c.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        t => return Err(Error::MalformedHeader(format!("unknown activation tag {t}"))),
    };
    let seed = c.u64()?;
    let config = EncoderConfig { input_dim, hidden_dims, embed_dim, activation, seed };
    config.validate().map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let params = c.params(&config)?;
    let velocity = match c.u8()? {
        0 => None,
        1 => Some(c.params(&config)?),
        t => return Err(Error::Format(format!("bad velocity flag {t}"))),
    };
    let cluster = match c.u8()? {
        0 => None,
        1 => {
            let k = c.u32()?;
            let d = c.u32()?;
            let cen = c.f64s(k.checked_mul(d).ok_or_else(|| Error::Format("centroid size overflows".into()))?)?;
            let centroids = Array2::from_shape_vec((k, d), cen).expect("length checked");
            let n = usize::try_from(c.u64()?).map_err(|_| Error::Format("assignment count overflows".into()))?;
            let assignments = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            if assignments.iter().any(|&a| a >= k) {
                return Err(Error::Format("cluster assignment out of range".into()));
            }
            Some(ClusterModel { centroids, assignments })
        }
        t => return Err(Error::Format(format!("bad cluster flag {t}"))),
    };
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - c.pos)));
    }
    if !params.is_finite() {
        return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
    }
    Ok(Checkpoint { encoder: Encoder::from_parts(config, params)?, velocity, cluster })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
