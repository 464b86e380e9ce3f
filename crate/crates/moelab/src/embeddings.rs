//! `MOEB` embedding files: `"MOEB"`, then little-endian `u32` version (1),
//! `B`, `S`, `H`, then `B*S*H` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use moelab_core::numcore::{rng_normal, Rng};
use moelab_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOEB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// i.i.d. `N(0, 1)` hidden states `[batch, seq, hidden]`.
pub fn generate_random_states(
    batch: usize,
    seq: usize,
    hidden: usize,
    seed: u64,
) -> Result<Tensor> {
    Ok(rng_normal(
        &mut Rng::new(seed),
        &[batch, seq, hidden],
        0.0,
        1.0,
    )?)
}

/// Serializes a rank-3 tensor. Values are narrowed to `f32`.
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() != 3 {
        return Err(Error::Invalid(format!(
            "embedding files hold [B, S, H] tensors, got shape {:?}",
            t.shape()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| Error::Invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses an embedding file image; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {:?}, expected \"MOEB\"", &bytes[..4]),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let dims = [word(8) as usize, word(12) as usize, word(16) as usize];
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = count
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::format(path, 8, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            (HEADER_LEN + payload.len().min(expected)) as u64,
            format!(
                "payload for {:?} needs {expected} bytes, found {}",
                dims,
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(&dims, data).map_err(|e| Error::format(path, HEADER_LEN as u64, e.to_string()))
}

pub fn save_embeddings(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
