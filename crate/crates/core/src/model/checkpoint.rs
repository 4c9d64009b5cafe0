//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "CKDCKPT\0"
//! version    u32       1
//! config     7 × u64   num_layers hidden_dim num_heads ffn_dim vocab_size max_seq_len num_classes
//!            f64       dropout (IEEE-754 bits, LE)
//! metadata   u32 count, then per entry: u32 len + UTF-8 key, u32 len + UTF-8 value
//! tensors    u32 count, then per tensor:
//!              u32 len + UTF-8 name
//!              u32 ndim, ndim × u64 dims
//!              prod(dims) × f64 (row-major, LE)
//! ```
//!
//! Tensors are written in [`ParamSet::for_each_tensor`] order; loading matches
//! by name and checks shapes, so `load(save(x)) == x` bit for bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CKDCKPT\0";
const VERSION: u32 = 1;

/// Parameters plus free-form string metadata (e.g. the sub-network grid an
/// adaptive checkpoint was trained for).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ParamSet) -> Self {
        Self {
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.params.config;
        for v in [
            c.num_layers,
            c.hidden_dim,
            c.num_heads,
            c.ffn_dim,
            c.vocab_size,
            c.max_seq_len,
            c.num_classes,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        let mut count = 0u32;
        self.params.for_each_tensor(|_, _, _| count += 1);
        out.extend_from_slice(&count.to_le_bytes());
        self.params.for_each_tensor(|name, data, shape| {
            put_str(&mut out, name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let dropout = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let config = ModelConfig {
            num_layers: dims[0],
            hidden_dim: dims[1],
            num_heads: dims[2],
            ffn_dim: dims[3],
            vocab_size: dims[4],
            max_seq_len: dims[5],
            num_classes: dims[6],
            dropout,
        };
        config.validate()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let mut params = ParamSet::zeros(&config);
        let mut expected = BTreeMap::new();
        params.for_each_tensor(|name, _, shape| {
            expected.insert(name.to_string(), shape.to_vec());
        });
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some((s, _)) if s != shape => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: shape {s:?}, expected {shape:?}"
                    )))
                }
                _ => {}
            }
        }
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        params.for_each_tensor_mut(|name, dst| dst.copy_from_slice(&tensors[name].1));
        Ok(Self { params, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}
