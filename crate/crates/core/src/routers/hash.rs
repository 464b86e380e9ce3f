use alloc::vec;
use alloc::vec::Vec;

use super::{check_width, HashAlgorithm, Router, RouterConfig, RouterKind};
use crate::error::Result;
use crate::grad::{NodeId, Parameterized, Tape};
use crate::numcore::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
/// Coordinates read by the hash.
const HASHED_COORDS: usize = 64;

/// Murmur3 64-bit finalizer.
fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^ (k >> 33)
}

/// Parameter-free router sending each token to `hash(x) mod E` with
/// probability one.
///
/// The hash is FNV-1a over the bytes of a per-token key followed by a
/// Murmur3 finalizer. With [`HashAlgorithm::SignBits`] the key is the sign
/// bit pattern of the first 64 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct HashRouter {
    pub hidden_size: usize,
    pub num_experts: usize,
    pub algorithm: HashAlgorithm,
    pub scale: f64,
    pub seed: u64,
}

impl HashRouter {
    pub fn new(cfg: &RouterConfig) -> Result<Self> {
        Ok(Self {
            hidden_size: cfg.hidden_size,
            num_experts: cfg.num_experts,
            algorithm: cfg.hash_algorithm,
            scale: cfg.hash_scale,
            seed: cfg.seed,
        })
    }

    pub fn hash(&self, token: &[f64]) -> u64 {
        let mut h = FNV_OFFSET ^ fmix64(self.seed);
        let mut feed = |bytes: [u8; 8]| {
            for b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(FNV_PRIME);
            }
        };
        let coords = &token[..token.len().min(HASHED_COORDS)];
        match self.algorithm {
            HashAlgorithm::SignBits => {
                let bits = coords.iter().enumerate().fold(0u64, |acc, (i, v)| {
                    acc | (u64::from(v.is_sign_negative()) << i)
                });
                feed(bits.to_le_bytes());
            }
            HashAlgorithm::Quantized => {
                for v in coords {
                    feed((libm::round(v * self.scale) as i64).to_le_bytes());
                }
            }
        }
        fmix64(h)
    }

    pub fn expert_for(&self, token: &[f64]) -> usize {
        (self.hash(token) % self.num_experts as u64) as usize
    }
}

impl Parameterized for HashRouter {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }
}

impl Router for HashRouter {
    fn kind(&self) -> RouterKind {
        RouterKind::Hash
    }

    fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn num_experts(&self) -> usize {
        self.num_experts
    }

    fn record(&self, tape: &mut Tape<'_>, x: NodeId, _params: &[NodeId]) -> Result<NodeId> {
        let xv = tape.value(x);
        check_width(xv, self.hidden_size)?;
        let n = xv.rows();
        let mut data = vec![0.0; n * self.num_experts];
        for t in 0..n {
            data[t * self.num_experts + self.expert_for(xv.row(t))] = 1.0;
        }
        Ok(tape.constant(Tensor::new(&[n, self.num_experts], data)?))
    }
}
