//! Binary artifact container.
//!
//! Layout (little endian):
//!
//! ```text
//! "CCLB" | u16 version | u32 header_len | header (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data[numel]
//! ```
//!
//! The JSON header carries a `kind` field (`model`, `prefix`,
//! `calibration`) plus kind-specific metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::cache::{KVCache, PrefixCache, Provenance};
use super::config::TransformerConfig;
use super::TransformerModel;

pub const MAGIC: &[u8; 4] = b"CCLB";
pub const FORMAT_VERSION: u16 = 1;

const MAX_HEADER: u32 = 1 << 20;
const MAX_NAME: u32 = 4096;
const MAX_NDIM: u32 = 8;
const MAX_NUMEL: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn kind(&self) -> &str {
        self.header.get("kind").and_then(Value::as_str).unwrap_or("")
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` artifact, found `{}`",
                self.kind()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_container(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_container(&mut BufReader::new(File::open(path)?))
    }
}

/// `v` with object keys in sorted order at every level, so header bytes do
/// not depend on how `serde_json` was built.
fn sorted_keys(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            Value::Object(keys.into_iter().map(|k| (k.clone(), sorted_keys(&m[k]))).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(sorted_keys).collect()),
        other => other.clone(),
    }
}

pub fn write_container(w: &mut impl Write, c: &Container) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&sorted_keys(&c.header))?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(c.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &c.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated artifact while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_container(r: &mut impl Read) -> Result<Container> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let mut v = [0u8; 2];
    read_exact(r, &mut v, "version")?;
    let version = u16::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = read_u32(r, "header length")?;
    if hlen > MAX_HEADER {
        return Err(Error::Format(format!("header length {hlen} too large")));
    }
    let mut header = vec![0u8; hlen as usize];
    read_exact(r, &mut header, "header")?;
    let header: Value =
        serde_json::from_slice(&header).map_err(|e| Error::Format(format!("header is not JSON: {e}")))?;
    let count = read_u32(r, "tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = read_u32(r, "name length")?;
        if nlen > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {nlen} too large")));
        }
        let mut name = vec![0u8; nlen as usize];
        read_exact(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(r, "ndim")?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Format(format!("tensor `{name}` has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(read_u32(r, "dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        if numel == 0 || numel > MAX_NUMEL {
            return Err(Error::Format(format!("tensor `{name}` has bad shape {shape:?}")));
        }
        let mut raw = vec![0u8; numel * 4];
        read_exact(r, &mut raw, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(Container { header, tensors })
}

impl TransformerModel {
    pub fn to_container(&self) -> Container {
        Container {
            header: json!({ "kind": "model", "config": self.config }),
            tensors: self.named_tensors(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind("model")?;
        let config: TransformerConfig = serde_json::from_value(c.header["config"].clone())
            .map_err(|e| Error::Format(format!("bad model config: {e}")))?;
        Self::from_named(config, c.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

impl PrefixCache {
    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::new();
        for (i, (k, v)) in self.cache.layers().iter().enumerate() {
            tensors.push((format!("layers.{i}.k"), k.clone()));
            tensors.push((format!("layers.{i}.v"), v.clone()));
        }
        Container {
            header: json!({
                "kind": "prefix",
                "provenance": self.provenance,
                "m": self.m(),
                "prompt": self.prompt,
            }),
            tensors,
        }
    }

    /// Reads a prefix and checks its geometry against `config`.
    pub fn from_container(c: Container, config: &TransformerConfig) -> Result<Self> {
        c.expect_kind("prefix")?;
        let provenance: Provenance = serde_json::from_value(c.header["provenance"].clone())
            .map_err(|e| Error::Format(format!("bad provenance: {e}")))?;
        let prompt: Vec<u32> = serde_json::from_value(c.header["prompt"].clone())
            .map_err(|e| Error::Format(format!("bad prompt: {e}")))?;
        let m = c.header["m"].as_u64().ok_or_else(|| Error::Format("missing prefix length".into()))? as usize;
        if c.tensors.len() != 2 * config.n_layers {
            return Err(Error::Format(format!(
                "prefix holds {} tensors, model needs {}",
                c.tensors.len(),
                2 * config.n_layers
            )));
        }
        let want = [m, config.n_heads, config.head_dim()];
        let mut layers = Vec::with_capacity(config.n_layers);
        for (i, pair) in c.tensors.chunks(2).enumerate() {
            let (kn, k) = &pair[0];
            let (vn, v) = &pair[1];
            if *kn != format!("layers.{i}.k") || *vn != format!("layers.{i}.v") {
                return Err(Error::Format(format!("unexpected prefix tensors `{kn}`, `{vn}`")));
            }
            if k.shape() != want || v.shape() != want {
                return Err(Error::Format(format!(
                    "prefix layer {i} has shape {:?}, expected {want:?}",
                    k.shape()
                )));
            }
            layers.push((k.clone(), v.clone()));
        }
        Ok(Self {
            cache: KVCache::from_layers(config, layers)?,
            provenance,
            prompt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, config: &TransformerConfig) -> Result<Self> {
        Self::from_container(Container::load(path)?, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 6,
            max_seq_len: 8,
            ..TransformerConfig::llama_ish()
        }
    }

    #[test]
    fn model_round_trip_is_byte_stable() {
        let m = TransformerModel::init(tiny(), 9).unwrap();
        let mut a = Vec::new();
        write_container(&mut a, &m.to_container()).unwrap();
        let back = TransformerModel::from_container(read_container(&mut a.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut b = Vec::new();
        write_container(&mut b, &back.to_container()).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..4], b"CCLB");
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let m = TransformerModel::init(tiny(), 9).unwrap();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &m.to_container()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&mut bad.as_slice()), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_container(&mut bad.as_slice()), Err(Error::Format(_))));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_container(&mut &cut[..]), Err(Error::Format(_))));

        let c = read_container(&mut bytes.as_slice()).unwrap();
        assert!(matches!(PrefixCache::from_container(c, &tiny()), Err(Error::Format(_))));
    }

    #[test]
    fn prefix_round_trip() {
        let m = TransformerModel::init(tiny(), 2).unwrap();
        let p = m.extract_prefix_cache(&[1, 2, 3]).unwrap();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &p.to_container()).unwrap();
        let back = PrefixCache::from_container(read_container(&mut bytes.as_slice()).unwrap(), &tiny()).unwrap();
        assert_eq!(back, p);
        let other = TransformerConfig { n_heads: 1, ..tiny() };
        let c = read_container(&mut bytes.as_slice()).unwrap();
        assert!(PrefixCache::from_container(c, &other).is_err());
    }
}
