//! Binary weights file: magic, format version, a JSON config block, then
//! named tensors as little-endian f64.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelParams};
use crate::preprocess::PreprocessConfig;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PCQAWGTS";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unsupported weights format version {0}")]
    Version(u32),
    #[error("weights file is truncated")]
    Truncated,
    #[error("invalid config block: {0}")]
    Config(String),
    #[error("expected tensor `{expected}`, found `{found}`")]
    Name { expected: String, found: String },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected {expected} tensors, file declares {found}")]
    TensorCount { expected: usize, found: usize },
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    preprocess: PreprocessConfig,
}

/// Parameters with the preprocessing config they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedWeights {
    pub params: ModelParams,
    pub preprocess: PreprocessConfig,
}

pub fn save_weights(params: &ModelParams, preprocess: &PreprocessConfig) -> Vec<u8> {
    let block = serde_json::to_vec(&ConfigBlock {
        model: params.config.clone(),
        preprocess: preprocess.clone(),
    })
    .expect("config serializes");
    let tensors = params.named_tensors();
    let mut out = Vec::with_capacity(64 + block.len() + params.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(&block);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        if self.bytes.len() < n {
            return Err(WeightsError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WeightsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<LoadedWeights, WeightsError> {
    let mut r = Reader { bytes };
    if r.bytes.len() < MAGIC.len() || &r.bytes[..MAGIC.len()] != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    r.take(MAGIC.len())?;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(WeightsError::Version(version));
    }
    let len = r.u32()? as usize;
    let block: ConfigBlock =
        serde_json::from_slice(r.take(len)?).map_err(|e| WeightsError::Config(e.to_string()))?;
    let template =
        ModelParams::zeros(&block.model).map_err(|e| WeightsError::Config(e.to_string()))?;
    let expected = template.named_tensors();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(WeightsError::TensorCount {
            expected: expected.len(),
            found: count,
        });
    }
    let mut leaves = Vec::with_capacity(count);
    for (want_name, want) in expected {
        let n = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(n)?).into_owned();
        if name != want_name {
            return Err(WeightsError::Name {
                expected: want_name,
                found: name,
            });
        }
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(WeightsError::ShapeMismatch {
                name,
                expected: want.shape().to_vec(),
                found: vec![ndim],
            });
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != want.shape() {
            return Err(WeightsError::ShapeMismatch {
                name,
                expected: want.shape().to_vec(),
                found: shape,
            });
        }
        let data = r
            .take(want.len() * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        leaves.push(Tensor::new(shape, data).expect("shape checked"));
    }
    if !r.bytes.is_empty() {
        return Err(WeightsError::TrailingBytes(r.bytes.len()));
    }
    Ok(LoadedWeights {
        params: template.with_leaves(leaves),
        preprocess: block.preprocess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample() -> (ModelParams, PreprocessConfig) {
        let cfg = ModelConfig {
            seed: 9,
            ..ModelConfig::micro()
        };
        (init_model(&cfg).unwrap(), PreprocessConfig::small())
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (p, pre) = sample();
        let bytes = save_weights(&p, &pre);
        let back = load_weights(&bytes).unwrap();
        assert_eq!(back.preprocess, pre);
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(back.params.named_tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(save_weights(&back.params, &back.preprocess), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let (p, pre) = sample();
        let bytes = save_weights(&p, &pre);
        assert_eq!(load_weights(b"nope"), Err(WeightsError::BadMagic));
        let mut v = bytes.clone();
        v[8] = 7;
        assert_eq!(load_weights(&v), Err(WeightsError::Version(7)));
        assert_eq!(
            load_weights(&bytes[..bytes.len() - 3]),
            Err(WeightsError::Truncated)
        );
        let mut v = bytes.clone();
        v.push(0);
        assert_eq!(load_weights(&v), Err(WeightsError::TrailingBytes(1)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (p, pre) = sample();
        let bytes = save_weights(&p, &pre);
        // change the first dim of the first tensor (3 -> 4)
        let cfg_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let name_len_at = 16 + cfg_len + 4;
        let name_len = u32::from_le_bytes(bytes[name_len_at..name_len_at + 4].try_into().unwrap());
        let dim_at = name_len_at + 4 + name_len as usize + 4;
        let mut v = bytes.clone();
        v[dim_at] = 4;
        match load_weights(&v) {
            Err(WeightsError::ShapeMismatch {
                name,
                expected,
                found,
            }) => {
                assert_eq!(name, "block0.geo_embed.w1");
                assert_eq!(expected, vec![3, 4]);
                assert_eq!(found, vec![4, 4]);
            }
            other => panic!("{other:?}"),
        }
    }
}
