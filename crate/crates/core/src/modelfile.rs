//! Trained model files.
//!
//! Layout (all integers `u32` little-endian, all tensors `f64` little-endian):
//!
//! ```text
//! "SADM"                      magic
//! version                     currently 1
//! config_len, config          UTF-8 JSON of the training configuration
//! height, width, bands
//! dim, layers, kernel_size
//! per layer: wq (bands*dim), wk (bands*dim), wv (bands*dim), wo (dim*bands)
//! kernel                      kernel_size^2
//! guidance                    height*width anomaly map used for detection
//! ```

use std::fs;
use std::path::Path;

use crate::cube::AnomalyMap;
use crate::error::{io_err, Error, Result};
use crate::model::{AttentionLayer, ModelParams};
use crate::train::{TrainConfig, TrainedModel};

pub const MODEL_MAGIC: &[u8; 4] = b"SADM";
pub const MODEL_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Dimensions(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION as usize)?;
    let config = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    let p = &model.params;
    for v in [model.height, model.width, model.bands, p.dim, p.layers.len(), p.kernel_size] {
        put_u32(&mut out, v)?;
    }
    for t in p.tensors() {
        put_f64s(&mut out, t);
    }
    put_f64s(&mut out, model.guidance.scores());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.bytes.len(),
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Malformed {
            what: "model file",
            offset: start,
            reason: "tensor size overflows".into(),
        })?)?;
        raw.chunks_exact(8)
            .enumerate()
            .map(|(i, b)| {
                let v = f64::from_le_bytes(b.try_into().unwrap());
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite { offset: start + i * 8 })
                }
            })
            .collect()
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: "SADM".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != MODEL_VERSION as usize {
        return Err(Error::Malformed {
            what: "model file",
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let config_len = r.u32()?;
    let config: TrainConfig = serde_json::from_slice(r.take(config_len)?)?;
    let (height, width, bands) = (r.u32()?, r.u32()?, r.u32()?);
    let (dim, layer_count, kernel_size) = (r.u32()?, r.u32()?, r.u32()?);
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        layers.push(AttentionLayer {
            wq: r.f64s(bands * dim)?,
            wk: r.f64s(bands * dim)?,
            wv: r.f64s(bands * dim)?,
            wo: r.f64s(dim * bands)?,
        });
    }
    let kernel = r.f64s(kernel_size * kernel_size)?;
    let guidance = AnomalyMap::new(height, width, r.f64s(height * width)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Malformed {
            what: "model file",
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }
    Ok(TrainedModel {
        config,
        height,
        width,
        bands,
        params: ModelParams {
            bands,
            dim,
            layers,
            kernel_size,
            kernel,
        },
        guidance,
    })
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)?).map_err(io_err(path))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    decode_model(&fs::read(path).map_err(io_err(path))?)
}
