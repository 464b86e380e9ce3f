use alloc::vec;
use alloc::vec::Vec;

use super::{Router, RouterConfig, RouterKind};
use crate::error::{shape_err, Result};
use crate::grad::{NodeId, Parameterized, Tape};
use crate::numcore::{rng_normal, Activation, Rng, Tensor};

/// `softmax(W2 act(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpRouter {
    /// `[d_h, H]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[E, d_h]`
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl MlpRouter {
    pub fn new(cfg: &RouterConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        let (h, dh, e) = (cfg.hidden_size, cfg.mlp_hidden, cfg.num_experts);
        Self::from_parts(
            rng_normal(&mut rng, &[dh, h], 0.0, cfg.init_std)?,
            Tensor::zeros(&[dh]),
            rng_normal(&mut rng, &[e, dh], 0.0, cfg.init_std)?,
            Tensor::zeros(&[e]),
            cfg.activation,
        )
    }

    pub fn from_parts(
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        if w1.rank() != 2
            || w2.rank() != 2
            || b1.len() != w1.rows()
            || w2.cols() != w1.rows()
            || b2.len() != w2.rows()
        {
            return Err(shape_err!(
                "mlp router: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?} disagree",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            ));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.rows()
    }
}

impl Parameterized for MlpRouter {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl Router for MlpRouter {
    fn kind(&self) -> RouterKind {
        RouterKind::Mlp
    }

    fn hidden_size(&self) -> usize {
        self.w1.cols()
    }

    fn num_experts(&self) -> usize {
        self.w2.rows()
    }

    fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let h = tape.linear(x, params[0])?;
        let h = tape.add_bias(h, params[1])?;
        let h = tape.activation(h, self.activation);
        let logits = tape.linear(h, params[2])?;
        let logits = tape.add_bias(logits, params[3])?;
        tape.softmax(logits, 1.0)
    }
}
