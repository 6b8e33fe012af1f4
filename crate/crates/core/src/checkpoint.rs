//! Binary checkpoint format.
//!
//! ```text
//! "PRMA" | u32 version | u32 entry count
//! entry: u16 name length | name (UTF-8) | u8 dtype | u8 rank | rank × u64 dims | values
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and values are little-endian. Model configuration travels as
//! `meta.*` entries next to the parameters.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{AggregationVariant, ModelConfig, PremaParams};
use crate::encoder::{CnnEncoderParams, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{prefixed, Parameterized};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PRMA";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(c: u8) -> Option<Dtype> {
        match c {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

pub fn encode(entries: &[(String, &Tensor)], dtype: Dtype) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| Error::Argument("too many entries".into()))?.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Argument(format!("entry name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Argument(format!("rank of {name} too large")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype as u8);
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Entry>> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(bad("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(bad(format!("CRC mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    let mut r = Reader { bytes: body, at: 0 };
    let truncated = || bad("truncated entry".into());
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing PRMA magic".into()));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32().ok_or_else(truncated)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| bad("entry name is not UTF-8".into()))?
            .to_string();
        let code = r.u8().ok_or_else(truncated)?;
        let dtype = Dtype::from_code(code).ok_or_else(|| bad(format!("{name}: unknown dtype {code}")))?;
        let rank = r.u8().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64().ok_or_else(truncated)?).map_err(|_| bad(format!("{name}: dim too large")))?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(format!("{name}: size overflow")))?;
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = r
            .take(numel.checked_mul(width).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let tensor = Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        out.push(Entry { name, dtype, tensor });
    }
    if r.at != body.len() {
        return Err(bad(format!("{} trailing bytes after the last entry", body.len() - r.at)));
    }
    Ok(out)
}

pub fn write_entries(path: &Path, entries: &[(String, &Tensor)], dtype: Dtype) -> Result<()> {
    let bytes = encode(entries, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn scalar(v: f64) -> Tensor {
    Tensor::vector(vec![v]).expect("one finite value")
}

fn encoder_meta(cfg: &EncoderConfig) -> Vec<(String, Tensor)> {
    vec![
        ("meta.image_size".into(), scalar(cfg.image_size as f64)),
        (
            "meta.channels".into(),
            Tensor::vector(cfg.channels.iter().map(|&c| c as f64).collect()).expect("channels nonempty"),
        ),
        ("meta.kernel".into(), scalar(cfg.kernel as f64)),
        ("meta.stride".into(), scalar(cfg.stride as f64)),
        ("meta.pad".into(), scalar(cfg.pad as f64)),
        ("meta.middle_tap".into(), scalar(cfg.middle_tap as f64)),
        ("meta.feature_dim".into(), scalar(cfg.feature_dim as f64)),
    ]
}

struct Meta<'a> {
    entries: &'a [Entry],
    path: &'a Path,
}

impl Meta<'_> {
    fn values(&self, key: &str) -> Result<Vec<usize>> {
        let name = format!("meta.{key}");
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint {
                path: self.path.to_path_buf(),
                reason: format!("missing {name}"),
            })?;
        e.tensor
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Checkpoint {
                        path: self.path.to_path_buf(),
                        reason: format!("{name} holds non-integer {v}"),
                    })
                }
            })
            .collect()
    }

    fn one(&self, key: &str) -> Result<usize> {
        let v = self.values(key)?;
        v.first().copied().ok_or_else(|| Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: format!("meta.{key} is empty"),
        })
    }

    fn encoder(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            image_size: self.one("image_size")?,
            channels: self.values("channels")?,
            kernel: self.one("kernel")?,
            stride: self.one("stride")?,
            pad: self.one("pad")?,
            middle_tap: self.one("middle_tap")?,
            feature_dim: self.one("feature_dim")?,
        })
    }
}

/// Copies every named parameter of `target` from `entries` (shapes must match).
fn fill<P: Parameterized>(target: &mut P, prefix: &str, entries: &[Entry], path: &Path) -> Result<()> {
    for (name, t) in target.named_params_mut() {
        let full = if prefix.is_empty() { name } else { format!("{prefix}.{name}") };
        let e = entries.iter().find(|e| e.name == full).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing parameter {full}"),
        })?;
        if e.tensor.shape() != t.shape() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("{full}: shape {:?}, model expects {:?}", e.tensor.shape(), t.shape()),
            });
        }
        t.data_mut().copy_from_slice(e.tensor.data());
    }
    Ok(())
}

fn warn_lossy(entries: &[Entry], path: &Path) {
    if entries.iter().any(|e| e.dtype == Dtype::F32) {
        log::warn!("{}: f32 entries loaded; values carry f32 rounding", path.display());
    }
}

/// Stage-1 checkpoint: the encoder under `encoder.*`.
pub fn save_encoder(path: &Path, encoder: &CnnEncoderParams, dtype: Dtype) -> Result<()> {
    let meta = encoder_meta(&encoder.config);
    let mut entries: Vec<(String, &Tensor)> = meta.iter().map(|(n, t)| (n.clone(), t)).collect();
    entries.extend(prefixed("encoder", encoder.named_params()));
    write_entries(path, &entries, dtype)
}

pub fn load_encoder(path: &Path) -> Result<CnnEncoderParams> {
    let entries = read_entries(path)?;
    let meta = Meta { entries: &entries, path };
    let cfg = meta.encoder()?;
    cfg.validate().map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut enc = CnnEncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill(&mut enc, "encoder", &entries, path)?;
    warn_lossy(&entries, path);
    Ok(enc)
}

pub fn model_config(params: &PremaParams) -> ModelConfig {
    let (d_h1, d_h2) = match (&params.level1, &params.level2) {
        (Some(a), Some(b)) => (a.fwd.hidden_dim(), b.fwd.hidden_dim()),
        _ => (0, 0),
    };
    ModelConfig {
        encoder: params.encoder.config.clone(),
        d_h1,
        d_k: params.rau.as_ref().map_or(0, |r| r.d_k()),
        d_h2,
        classes: params.classes(),
        variant: params.variant,
    }
}

/// Full-model checkpoint.
pub fn save_model(path: &Path, params: &PremaParams, dtype: Dtype) -> Result<()> {
    let cfg = model_config(params);
    let mut meta = encoder_meta(&cfg.encoder);
    meta.push(("meta.variant".into(), scalar(params.variant.code() as f64)));
    meta.push(("meta.d_h1".into(), scalar(cfg.d_h1 as f64)));
    meta.push(("meta.d_k".into(), scalar(cfg.d_k as f64)));
    meta.push(("meta.d_h2".into(), scalar(cfg.d_h2 as f64)));
    meta.push(("meta.classes".into(), scalar(cfg.classes as f64)));
    let mut entries: Vec<(String, &Tensor)> = meta.iter().map(|(n, t)| (n.clone(), t)).collect();
    entries.extend(params.named_params());
    write_entries(path, &entries, dtype)
}

pub fn load_model(path: &Path) -> Result<PremaParams> {
    let entries = read_entries(path)?;
    let meta = Meta { entries: &entries, path };
    let code = meta.one("variant")?;
    let variant = u8::try_from(code)
        .ok()
        .and_then(AggregationVariant::from_code)
        .ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unknown variant code {code}"),
        })?;
    // Dimensions unused by a variant are stored as 0; any positive value builds.
    let dim = |k: &str| meta.one(k).map(|v| v.max(1));
    let cfg = ModelConfig {
        encoder: meta.encoder()?,
        d_h1: dim("d_h1")?,
        d_k: dim("d_k")?,
        d_h2: dim("d_h2")?,
        classes: meta.one("classes")?,
        variant,
    };
    let as_ckpt = |e: Error| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    cfg.validate().map_err(as_ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = CnnEncoderParams::init(&cfg.encoder, &mut rng).map_err(as_ckpt)?;
    let mut params = PremaParams::init(&cfg, enc, &mut rng).map_err(as_ckpt)?;
    fill(&mut params, "", &entries, path)?;
    let expected = params.named_params().len() + entries.iter().filter(|e| e.name.starts_with("meta.")).count();
    if expected != entries.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("{} entries, expected {expected}", entries.len()),
        });
    }
    warn_lossy(&entries, path);
    Ok(params)
}
