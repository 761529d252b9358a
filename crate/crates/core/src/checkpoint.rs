//! Checkpoint files: one line of JSON header, then little-endian tensor blobs.
//!
//! The header holds the format version, the model configuration, an optional
//! vocabulary and a tensor directory (`name`, `shape`, `dtype`, `offset`).
//! Offsets count bytes from the first byte after the header's newline, and
//! blobs appear in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::vocab::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn of<T: Scalar>() -> Dtype {
        if T::DTYPE == "f32" {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: Dtype,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub vocabulary: Option<Vocabulary>,
    pub params: ModelParams<T>,
}

pub fn to_bytes<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocabulary: Option<&Vocabulary>,
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for (name, m) in params.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            dtype,
            offset: blobs.len(),
        });
        for &v in m.as_slice() {
            match dtype {
                Dtype::F32 => (v.to_f64_lossy() as f32).write_le(&mut blobs),
                Dtype::F64 => v.to_f64_lossy().write_le(&mut blobs),
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        vocabulary: vocabulary.cloned(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header.config.validate()?;
    let blobs = &bytes[newline + 1..];

    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut params = ModelParams::<T>::init(&header.config, &mut rng)?;
    let slots = params.named_tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, header lists {}",
            slots.len(),
            header.tensors.len()
        )));
    }
    for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
        if name != entry.name || [slot.rows(), slot.cols()] != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} {:?} does not match expected {name:?} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let width = entry.dtype.size();
        let end = entry.offset + slot.len() * width;
        let raw = blobs
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past end of file")))?;
        for (dst, chunk) in slot.as_mut_slice().iter_mut().zip(raw.chunks_exact(width)) {
            let v = match entry.dtype {
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
            };
            *dst = T::from_f64_lossy(v);
        }
    }
    Ok(Checkpoint {
        config: header.config,
        vocabulary: header.vocabulary,
        params,
    })
}

pub fn save<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocabulary: Option<&Vocabulary>,
    dtype: Dtype,
) -> Result<()> {
    let bytes = to_bytes(params, config, vocabulary, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(tie: bool) -> ModelConfig {
        ModelConfig {
            d: 4,
            layers: 1,
            heads: 2,
            window: 3,
            num_devices: 3,
            num_controls: 5,
            tie_output: tie,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        for tie in [false, true] {
            let c = config(tie);
            let p = ModelParams::<f64>::init(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let bytes = to_bytes(&p, &c, None, Dtype::F64).unwrap();
            let back = from_bytes::<f64>(&bytes).unwrap();
            assert_eq!(back.params, p);
            assert_eq!(back.config, c);
        }
    }

    #[test]
    fn f32_storage_round_trips_f32_values() {
        let c = config(false);
        let p = ModelParams::<f32>::init(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let bytes = to_bytes(&p, &c, None, Dtype::F32).unwrap();
        assert_eq!(from_bytes::<f32>(&bytes).unwrap().params, p);
        let widened = from_bytes::<f64>(&bytes).unwrap().params;
        assert_eq!(widened, p.cast::<f64>());
    }

    #[test]
    fn header_is_json_line_with_ordered_offsets() {
        let c = config(false);
        let p = ModelParams::<f64>::init(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bytes = to_bytes(&p, &c, None, Dtype::F64).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: Header = serde_json::from_slice(&bytes[..nl]).unwrap();
        let mut expected = 0;
        for t in &header.tensors {
            assert_eq!(t.offset, expected);
            expected += t.shape[0] * t.shape[1] * 8;
        }
        assert_eq!(bytes.len() - nl - 1, expected);
        let e_dev = f64::from_le_bytes(bytes[nl + 1..nl + 9].try_into().unwrap());
        assert_eq!(e_dev, p.e_dev[(0, 0)]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let c = config(false);
        let p = ModelParams::<f64>::init(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bytes = to_bytes(&p, &c, None, Dtype::F64).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes::<f64>(b"{}").is_err());
    }
}
