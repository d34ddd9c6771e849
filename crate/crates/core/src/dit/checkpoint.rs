//! `EZDT` tensor container.
//!
//! ```text
//! "EZDT" | u32 LE version (1) | u64 LE header length | UTF-8 JSON header | payload
//! ```
//!
//! The header is `{"tensors": [{name, shape, dtype, byte_offset}, ..], "metadata": {..}}`
//! with `byte_offset` relative to the start of the payload. Tensors are stored
//! as little-endian `f64` in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DitModel, ModelConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EZDT";
pub const VERSION: u32 = 1;
const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamStore,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let mut offset = 0u64;
    let tensors: Vec<TensorEntry> = ckpt
        .tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: DTYPE.to_string(),
                byte_offset: offset,
            };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        tensors,
        metadata: ckpt.metadata.clone(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in ckpt.tensors.iter() {
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut tensors = ParamStore::new();
    for e in header.tensors {
        if e.dtype != DTYPE {
            return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(bad(format!("{}: payload truncated", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if tensors.contains(&e.name) {
            return Err(bad(format!("duplicate tensor {}", e.name)));
        }
        tensors.insert(e.name, Tensor::new(&e.shape, data)?);
    }
    Ok(Checkpoint {
        tensors,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

impl DitModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut metadata = BTreeMap::new();
        metadata.insert("config".to_string(), serde_json::to_value(&self.config)?);
        Ok(Checkpoint {
            tensors: self.params.clone(),
            metadata,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt
            .metadata
            .get("config")
            .ok_or_else(|| Error::Checkpoint("metadata has no model config".into()))?;
        let config: ModelConfig = serde_json::from_value(config.clone())?;
        config.validate()?;
        Ok(Self {
            config,
            params: ckpt.tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = ParamStore::new();
        tensors.insert("a", Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        tensors.insert("b", Tensor::vector(vec![std::f64::consts::PI]));
        let mut metadata = BTreeMap::new();
        metadata.insert("note".into(), serde_json::json!("x"));
        Checkpoint { tensors, metadata }
    }

    #[test]
    fn layout_is_as_documented() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..4], b"EZDT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&buf[16..16 + len]).unwrap();
        assert_eq!(header["tensors"][1]["name"], "b");
        assert_eq!(header["tensors"][1]["byte_offset"], 32);
        assert_eq!(header["tensors"][0]["dtype"], "f64");
        assert_eq!(buf.len(), 16 + len + 5 * 8);
        let first = f64::from_le_bytes(buf[16 + len..24 + len].try_into().unwrap());
        assert_eq!(first, 1.0);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert!(back.tensors.bit_eq(&c.tensors));
        assert_eq!(back.metadata, c.metadata);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Checkpoint(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(short), Err(Error::Checkpoint(_))));
    }
}
