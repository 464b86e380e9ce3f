use alloc::vec;
use alloc::vec::Vec;

use super::{KeyInit, Router, RouterConfig, RouterKind, NORM_EPS};
use crate::error::{param_err, shape_err, Result};
use crate::grad::{NodeId, Parameterized, Tape};
use crate::numcore::{rng_normal, Rng, Tensor};

/// Tokens as queries against learned expert keys.
///
/// `q = normalize(W_q x)`, `scores = q Kᵀ / (sqrt(d_k) τ)`, `p = softmax(scores)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRouter {
    /// `[d_k, H]`
    pub query: Tensor,
    /// `[E, d_k]`
    pub keys: Tensor,
    pub temperature: f64,
}

impl AttentionRouter {
    pub fn new(cfg: &RouterConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        Self::init(cfg, &mut rng)
    }

    pub(crate) fn init(cfg: &RouterConfig, rng: &mut Rng) -> Result<Self> {
        let query = rng_normal(rng, &[cfg.qk_dim, cfg.hidden_size], 0.0, cfg.init_std)?;
        let keys = match cfg.key_init {
            KeyInit::Normal => rng_normal(rng, &[cfg.num_experts, cfg.qk_dim], 0.0, cfg.init_std)?,
            KeyInit::Uniform => {
                let a = libm::sqrt(3.0) * cfg.init_std;
                let data = (0..cfg.num_experts * cfg.qk_dim)
                    .map(|_| rng.uniform(-a, a))
                    .collect();
                Tensor::new(&[cfg.num_experts, cfg.qk_dim], data)?
            }
        };
        Self::from_parts(query, keys, cfg.temperature)
    }

    pub fn from_parts(query: Tensor, keys: Tensor, temperature: f64) -> Result<Self> {
        if query.rank() != 2 || keys.rank() != 2 || query.rows() != keys.cols() {
            return Err(shape_err!(
                "attention router: query {:?} and keys {:?} disagree on d_k",
                query.shape(),
                keys.shape()
            ));
        }
        if !(temperature > 0.0) {
            return Err(param_err!(
                "temperature must be positive, got {}",
                temperature
            ));
        }
        Ok(Self {
            query,
            keys,
            temperature,
        })
    }

    pub fn qk_dim(&self) -> usize {
        self.query.rows()
    }

    /// Scaled scores before the softmax.
    pub(crate) fn record_scores(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId> {
        let q = tape.linear(x, params[0])?;
        let q = tape.l2_normalize(q, NORM_EPS)?;
        let s = tape.linear(q, params[1])?;
        let scale = 1.0 / (libm::sqrt(self.qk_dim() as f64) * self.temperature);
        Ok(tape.scale(s, scale))
    }
}

impl Parameterized for AttentionRouter {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("query", &self.query), ("keys", &self.keys)]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.query, &mut self.keys]
    }
}

impl Router for AttentionRouter {
    fn kind(&self) -> RouterKind {
        RouterKind::Attention
    }

    fn hidden_size(&self) -> usize {
        self.query.cols()
    }

    fn num_experts(&self) -> usize {
        self.keys.rows()
    }

    fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let s = self.record_scores(tape, x, params)?;
        tape.softmax(s, 1.0)
    }
}
