//! On-disk cache for the interaction tensor.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  b"CIPTNSR\0"
//! version  u32
//! order    u32
//! s_min    f64
//! cutoff   f64
//! spacing  f64
//! entries  order³ × f64, (k, m, n) row-major
//! sha256   32 bytes over everything above
//! ```

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{InteractionTensor, LaguerreBasis, QuadratureConfig};
use crate::error::{CipError, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"CIPTNSR\0";
pub const TENSOR_CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 * 3;

/// Header fields recorded alongside the tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorCacheHeader {
    pub order: usize,
    pub s_min: f64,
    pub quad: QuadratureConfig,
}

pub fn encode_tensor(
    tensor: &InteractionTensor,
    basis: &LaguerreBasis,
    quad: &QuadratureConfig,
) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + tensor.entries().len() * 8 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&TENSOR_CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.order() as u32).to_le_bytes());
    buf.extend_from_slice(&basis.s_min().to_le_bytes());
    buf.extend_from_slice(&quad.cutoff.to_le_bytes());
    buf.extend_from_slice(&quad.spacing.to_le_bytes());
    for v in tensor.entries() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(TensorCacheHeader, InteractionTensor)> {
    if bytes.len() < HEADER_LEN + 32 {
        return Err(CipError::Cache("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CipError::Cache("checksum mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(CipError::Cache("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != TENSOR_CACHE_VERSION {
        return Err(CipError::Cache(format!(
            "unsupported version {version} (expected {TENSOR_CACHE_VERSION})"
        )));
    }
    let order = u32_at(12) as usize;
    let header = TensorCacheHeader {
        order,
        s_min: f64_at(16),
        quad: QuadratureConfig {
            cutoff: f64_at(24),
            spacing: f64_at(32),
        },
    };
    let count = order * order * order;
    if body.len() != HEADER_LEN + count * 8 {
        return Err(CipError::Cache(format!(
            "payload length {} does not match order {order}",
            body.len() - HEADER_LEN
        )));
    }
    let entries = body[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let tensor = InteractionTensor::from_entries(order, entries)
        .map_err(|e| CipError::Cache(e.to_string()))?;
    Ok((header, tensor))
}

pub fn write_tensor_cache(
    path: &Path,
    tensor: &InteractionTensor,
    basis: &LaguerreBasis,
    quad: &QuadratureConfig,
) -> Result<()> {
    let bytes = encode_tensor(tensor, basis, quad);
    write_atomic(path, |w| w.write_all(&bytes))
}

/// Load a cached tensor, rejecting it unless it was built for `basis` and `quad`.
pub fn read_tensor_cache(
    path: &Path,
    basis: &LaguerreBasis,
    quad: &QuadratureConfig,
) -> Result<InteractionTensor> {
    let bytes = std::fs::read(path)?;
    let (header, tensor) = decode_tensor(&bytes)?;
    if header.order != basis.order() || header.s_min != basis.s_min() || header.quad != *quad {
        return Err(CipError::Cache(format!(
            "cache built for {header:?}, requested order {} s_min {} {quad:?}",
            basis.order(),
            basis.s_min()
        )));
    }
    Ok(tensor)
}
