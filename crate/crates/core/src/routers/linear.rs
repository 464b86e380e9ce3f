use alloc::vec;
use alloc::vec::Vec;

use super::{Router, RouterConfig, RouterKind};
use crate::error::{shape_err, Result};
use crate::grad::{NodeId, Parameterized, Tape};
use crate::numcore::{rng_normal, Rng, Tensor};

/// `softmax(W x + b)` with `W: [E, H]` and an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRouter {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearRouter {
    pub fn new(cfg: &RouterConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        let weight = rng_normal(
            &mut rng,
            &[cfg.num_experts, cfg.hidden_size],
            0.0,
            cfg.init_std,
        )?;
        let bias = cfg.linear_bias.then(|| Tensor::zeros(&[cfg.num_experts]));
        Self::from_parts(weight, bias)
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(shape_err!("linear router weight must be [E, H]"));
        }
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(shape_err!(
                    "bias length {} vs {} experts",
                    b.len(),
                    weight.rows()
                ));
            }
        }
        Ok(Self { weight, bias })
    }

    /// Pre-softmax logits `W x (+ b)`.
    pub(crate) fn record_logits(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId> {
        let logits = tape.linear(x, params[0])?;
        match params.get(1) {
            Some(&b) if self.bias.is_some() => tape.add_bias(logits, b),
            _ => Ok(logits),
        }
    }
}

impl Parameterized for LinearRouter {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        let mut p = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            p.push(("bias", b));
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            p.push(b);
        }
        p
    }
}

impl Router for LinearRouter {
    fn kind(&self) -> RouterKind {
        RouterKind::Linear
    }

    fn hidden_size(&self) -> usize {
        self.weight.cols()
    }

    fn num_experts(&self) -> usize {
        self.weight.rows()
    }

    fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let logits = self.record_logits(tape, x, params)?;
        tape.softmax(logits, 1.0)
    }
}
