//! Little-endian tensor container shared by checkpoints, datasets and
//! feature files.
//!
//! ```text
//! "SAGE" | u32 version | u32 count
//! count × ( u16 name_len | name | u8 dtype | u8 rank | rank × u64 dim | f64 payload )
//! u64 FNV-1a of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SAGE";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

/// Prefix of scalar metadata entries.
pub const META_PREFIX: &str = "meta/";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Ordered, uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Data(format!("entry name of {} bytes is too long", name.len())));
        }
        if tensor.rank() > u8::MAX as usize {
            return Err(Error::Data(format!("entry {name} has rank {}", tensor.rank())));
        }
        if self.get(&name).is_some() {
            return Err(Error::Data(format!("duplicate entry {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Incompatible(format!("missing entry {name}")))
    }

    /// Stores `value` as the scalar entry `meta/<key>`.
    pub fn set_meta(&mut self, key: &str, value: f64) -> Result<()> {
        self.insert(format!("{META_PREFIX}{key}"), Tensor::scalar(value))
    }

    pub fn meta(&self, key: &str) -> Result<f64> {
        let t = self.require(&format!("{META_PREFIX}{key}"))?;
        if t.numel() != 1 {
            return Err(Error::Incompatible(format!("metadata {key} is not a scalar")));
        }
        Ok(t.data()[0])
    }

    /// Metadata holding a count or id.
    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self.meta(key)?;
        to_index(v).ok_or_else(|| Error::Incompatible(format!("metadata {key} = {v} is not an index")))
    }

    /// Moves every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: Checkpoint) -> Result<()> {
        for (name, t) in other.entries {
            self.insert(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return r.fail_at(4, format!("unsupported version {version}"));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let start = r.pos as u64;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    offset: start + 2,
                    msg: "entry name is not UTF-8".into(),
                })?
                .to_string();
            let dtype_at = r.pos as u64;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return r.fail_at(dtype_at, format!("unknown dtype tag {dtype}"));
            }
            let rank = r.u8()? as usize;
            let dims_at = r.pos as u64;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= (bytes.len() - r.pos) as u64));
            let Some(numel) = numel else {
                return r.fail_at(dims_at, format!("entry {name}: dims {shape:?} exceed the file"));
            };
            let payload = r.take(numel as usize * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
            let tensor = Tensor::from_vec(shape, data).map_err(|e| Error::Format {
                offset: dims_at,
                msg: format!("entry {name}: {e}"),
            })?;
            ckpt.insert(name, tensor).map_err(|e| Error::Format {
                offset: start,
                msg: e.to_string(),
            })?;
        }
        let body_end = r.pos;
        let stored = r.u64()?;
        if stored != fnv1a(&bytes[..body_end]) {
            return r.fail_at(body_end as u64, "checksum mismatch".into());
        }
        if r.pos != bytes.len() {
            return r.fail_at(r.pos as u64, "trailing bytes after checksum".into());
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fail_at<T>(&self, offset: u64, msg: String) -> Result<T> {
        Err(Error::Format { offset, msg })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.encode())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

pub(crate) fn to_index(v: f64) -> Option<usize> {
    (v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15).then_some(v as usize)
}

/// Index vector stored as an f64 entry.
pub fn index_tensor(values: &[usize]) -> Tensor {
    Tensor::vector(values.iter().map(|&v| v as f64).collect())
}

pub fn read_indices(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| to_index(v).ok_or_else(|| Error::Data(format!("{what}: {v} is not an index"))))
        .collect()
}

/// Retrieval features with identity and camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `n × D`.
    pub features: Tensor,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl FeatureSet {
    pub fn new(features: Tensor, ids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        if features.rank() != 2 || ids.len() != n || cams.len() != n {
            return Err(Error::Shape(format!(
                "features {:?} with {} ids and {} cameras",
                features.shape(),
                ids.len(),
                cams.len()
            )));
        }
        Ok(Self { features, ids, cams })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("features", self.features.clone()).expect("fresh container");
        c.insert("ids", index_tensor(&self.ids)).expect("fresh container");
        c.insert("cams", index_tensor(&self.cams)).expect("fresh container");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let features = c.require("features")?.clone();
        let ids = read_indices(c.require("ids")?, "ids")?;
        let cams = read_indices(c.require("cams")?, "cams")?;
        if features.rank() != 2 {
            return Err(Error::Format {
                offset: 0,
                msg: format!("features must be a matrix, got {:?}", features.shape()),
            });
        }
        if ids.len() != features.rows() || cams.len() != features.rows() {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "header says {} rows but found {} ids and {} cameras",
                    features.rows(),
                    ids.len(),
                    cams.len()
                ),
            });
        }
        Ok(Self { features, ids, cams })
    }
}

pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    write_checkpoint(path, &set.to_checkpoint())
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::from_checkpoint(&read_checkpoint(path)?)
}
