//! `MOET` tensor containers: `"MOET"`, little-endian `u32` version (1) and
//! tensor count, then per tensor a `u32` name length, UTF-8 name, `u32`
//! rank, `u64` dims and little-endian `f64` data.

use std::fs;
use std::path::Path;

use moelab_core::grad::Parameterized;
use moelab_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOET";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"MOET\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(path, at, "dimensions overflow"))?;
        let data = r
            .take(n, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data)
            .map_err(|e| Error::format(path, at, format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            r.pos as u64,
            "trailing bytes after last tensor",
        ));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Parameters of `module` named `{prefix}{index}.{name}`.
pub fn named_parameters(module: &impl Parameterized, prefix: &str) -> Vec<(String, Tensor)> {
    module
        .parameters()
        .into_iter()
        .enumerate()
        .map(|(i, (name, t))| (format!("{prefix}{i}.{name}"), t.clone()))
        .collect()
}

/// Overwrites every parameter of `module` from `tensors`, in order.
pub fn restore_parameters(
    module: &mut impl Parameterized,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let mut params = module.parameters_mut();
    if params.len() != tensors.len() {
        return Err(Error::Invalid(format!(
            "module has {} tensors, container has {}",
            params.len(),
            tensors.len()
        )));
    }
    for (p, (name, t)) in params.iter_mut().zip(tensors) {
        if p.shape() != t.shape() {
            return Err(Error::Invalid(format!(
                "{name}: shape {:?} does not match parameter {:?}",
                t.shape(),
                p.shape()
            )));
        }
        **p = t.clone();
    }
    Ok(())
}

/// Looks up the four tensors of a BERT-style FFN: `intermediate.weight`,
/// `intermediate.bias`, `output.weight`, `output.bias`.
pub fn bert_ffn(tensors: &[(String, Tensor)]) -> Result<[Tensor; 4]> {
    let get = |key: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == key)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Invalid(format!("container has no tensor named '{key}'")))
    };
    Ok([
        get("intermediate.weight")?,
        get("intermediate.bias")?,
        get("output.weight")?,
        get("output.bias")?,
    ])
}
