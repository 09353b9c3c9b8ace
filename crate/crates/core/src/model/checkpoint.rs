//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..8        magic  b"GANCKPT\0"
//! 8..16       u64    header length L
//! 16..16+L    UTF-8 JSON header
//! 16+L..      tensor data, f32 LE, concatenated in header order
//! ```
//!
//! The header is `{"format": "gancomp-ckpt-v1", "spec": ..., "metadata": {...},
//! "tensors": [{"name", "shape", "dtype": "f32", "offset", "length"}]}` where
//! `offset`/`length` are element counts relative to the start of the data region.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::encoder::ConvEncoder;
use crate::model::generator::Generator;
use crate::model::spec::{EncoderSpec, GeneratorSpec};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "gancomp-ckpt-v1";
const MAGIC: &[u8; 8] = b"GANCKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Generator(GeneratorSpec),
    Encoder(EncoderSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub params: ParamSet<f32>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    spec: ModelSpec,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

impl ModelCheckpoint {
    pub fn from_generator(g: &Generator<f32>) -> Self {
        Self {
            spec: ModelSpec::Generator(g.spec.clone()),
            params: g.params.clone(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn from_encoder(e: &ConvEncoder<f32>) -> Self {
        Self {
            spec: ModelSpec::Encoder(e.spec.clone()),
            params: e.params.clone(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn to_generator(&self) -> Result<Generator<f32>> {
        match &self.spec {
            ModelSpec::Generator(s) => Generator::from_parts(s.clone(), self.params.clone()),
            ModelSpec::Encoder(_) => Err(Error::Format(
                "checkpoint holds an encoder, not a generator".into(),
            )),
        }
    }

    pub fn to_encoder(&self) -> Result<ConvEncoder<f32>> {
        match &self.spec {
            ModelSpec::Encoder(s) => ConvEncoder::from_parts(s.clone(), self.params.clone()),
            ModelSpec::Generator(_) => Err(Error::Format(
                "checkpoint holds a generator, not an encoder".into(),
            )),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length: t.len(),
            });
            offset += t.len();
        }
        let header = Header {
            format: FORMAT_VERSION.into(),
            spec: self.spec.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a gancomp checkpoint".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {}",
                header.format
            )));
        }
        let data = &bytes[data_start..];
        let mut params = ParamSet::new();
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!(
                    "{}: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let (start, end) = (e.offset * 4, (e.offset + e.length) * 4);
            if end > data.len() {
                return Err(Error::Format(format!("{}: data out of range", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name, Tensor::from_vec(&e.shape, values)?);
        }
        Ok(Self {
            spec: header.spec,
            params,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn params_hash(&self) -> String {
        params_hash(&self.params)
    }
}

/// SHA-256 over parameter names, shapes and raw values.
pub fn params_hash(params: &ParamSet<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn roundtrip_is_bit_exact_and_forward_identical() {
        let g = Generator::<f32>::new(GeneratorSpec::toy(8, [8, 8, 4]), 5).unwrap();
        let ck = ModelCheckpoint::from_generator(&g)
            .with_meta("seed", 5)
            .with_meta("step", 0);
        let bytes = ck.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let g2 = back.to_generator().unwrap();
        let z = Tensor::randn(&[2, 8], 1.0, &mut seeded_rng(3));
        let a = g.generate(&z).unwrap();
        let b = g2.generate(&z).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_garbage_and_wrong_kind() {
        assert!(ModelCheckpoint::from_bytes(b"hello world, not a checkpoint").is_err());
        let g = Generator::<f32>::new(GeneratorSpec::toy(8, [8, 8, 4]), 5).unwrap();
        let ck = ModelCheckpoint::from_generator(&g);
        assert!(ck.to_encoder().is_err());
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(ModelCheckpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected_on_load() {
        let g = Generator::<f32>::new(GeneratorSpec::toy(8, [8, 8, 4]), 5).unwrap();
        let mut ck = ModelCheckpoint::from_generator(&g);
        ck.params.insert("layers.0.bias", Tensor::zeros(&[3]));
        assert!(ck.to_generator().is_err());
    }
}
