//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     6 bytes   "RLBK1\0"
//! version   u32       1
//! meta_len  u64       length of the metadata block
//! metadata  meta_len  UTF-8 JSON: {name: {dtype, shape, offset, trainable}}
//! padding   zeros up to the next multiple of 64 from the start of the file
//! payload   raw little-endian scalars; `offset` is relative to the payload
//!           start and is a multiple of 64
//! ```

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result};
use crate::nn::ParamStore;
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 6] = b"RLBK1\0";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 6 + 4 + 8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

fn bad(msg: impl Into<String>) -> FormatError {
    FormatError::Checkpoint(msg.into())
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode_checkpoint<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let size = S::PRECISION.size();
    let mut meta = IndexMap::new();
    let mut offset = 0;
    for (name, p) in store.iter() {
        meta.insert(
            name.to_string(),
            TensorMeta {
                dtype: S::PRECISION.dtype_name().to_string(),
                shape: p.tensor.shape().to_vec(),
                offset,
                trainable: p.trainable,
            },
        );
        offset = align_up(offset + p.tensor.numel() * size);
    }
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let payload_start = align_up(PREAMBLE + json.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    for ((_, p), m) in store.iter().zip(meta.values()) {
        out.resize(payload_start + m.offset, 0);
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Parses a checkpoint, converting scalars to `S` if the stored dtype differs.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> std::result::Result<ParamStore<S>, FormatError> {
    if bytes.len() < PREAMBLE {
        return Err(FormatError::Truncated("checkpoint preamble".into()));
    }
    if &bytes[..6] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|l| PREAMBLE.checked_add(l))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("metadata length exceeds file size"))?;
    let meta: IndexMap<String, TensorMeta> = serde_json::from_slice(&bytes[PREAMBLE..meta_end])
        .map_err(|e| bad(format!("metadata is not valid JSON: {e}")))?;
    let payload_start = align_up(meta_end);
    if payload_start > bytes.len() && !meta.is_empty() {
        return Err(FormatError::Truncated("checkpoint payload".into()));
    }

    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(meta.len());
    for (name, m) in &meta {
        let prec = Precision::from_dtype_name(&m.dtype)
            .ok_or_else(|| bad(format!("`{name}`: unknown dtype `{}`", m.dtype)))?;
        if m.offset % ALIGN != 0 {
            return Err(bad(format!("`{name}`: offset {} is not 64-byte aligned", m.offset)));
        }
        let span = m
            .shape
            .iter()
            .try_fold(prec.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("`{name}`: shape {:?} overflows", m.shape)))?;
        let end = payload_start
            .checked_add(m.offset)
            .and_then(|s| s.checked_add(span))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                bad(format!(
                    "`{name}`: payload span [{}, +{span}) is out of bounds",
                    m.offset
                ))
            })?;
        spans.push((m.offset, end - payload_start, name));
    }
    let mut sorted = spans.clone();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(bad(format!("`{}` overlaps `{}`", w[1].2, w[0].2)));
        }
    }

    let mut store = ParamStore::new();
    for (name, m) in &meta {
        let prec = Precision::from_dtype_name(&m.dtype).unwrap();
        let start = payload_start + m.offset;
        let n: usize = m.shape.iter().product();
        let raw = &bytes[start..start + n * prec.size()];
        let data: Vec<S> = match prec {
            Precision::Single => raw
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::read_le(c) as f64))
                .collect(),
            Precision::Double => raw
                .chunks_exact(8)
                .map(|c| S::from_f64(f64::read_le(c)))
                .collect(),
        };
        let tensor = Tensor::new(m.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
        store
            .insert(name.clone(), tensor, m.trainable)
            .map_err(|e| bad(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<S>> {
    let bytes = std::fs::read(path)?;
    Ok(decode_checkpoint(&bytes)?)
}
