use alloc::vec;
use alloc::vec::Vec;

use super::{Router, RouterConfig, RouterKind};
use crate::error::{shape_err, Result};
use crate::grad::{MaskGrad, NodeId, Parameterized, Tape};
use crate::numcore::{rng_normal, Activation, Rng, Tensor};

/// First `rows` rows of a Sylvester Hadamard matrix restricted to `cols`
/// columns, scaled by `1/sqrt(cols)`.
///
/// Entry `(r, c)` is `(-1)^popcount(r & c) / sqrt(cols)`. The rows are
/// exactly orthonormal whenever `cols` is a multiple of the next power of
/// two at or above `rows`.
pub fn hadamard_rows(rows: usize, cols: usize) -> Tensor {
    let scale = 1.0 / libm::sqrt(cols as f64);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let sign = if (r & c).count_ones() % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            data.push(sign * scale);
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

/// MLP features gating the token by elementwise product, then a routing
/// head whose output is cut to the `router_top_k` largest probabilities.
///
/// `h = act(W1 x + b1) ⊙ x_p` where `x_p = W_p x`, or `x` itself when the
/// hidden width equals `H`. `p = topk_mask(softmax(W2 h + b2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHadamardRouter {
    /// `[d_h, H]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[d_h, H]`, present only when `d_h != H`.
    pub projection: Option<Tensor>,
    /// `[E, d_h]`
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
    pub router_top_k: usize,
    pub orth_lambda: f64,
    /// Backward rule of the output mask.
    pub mask_grad: MaskGrad,
}

impl MlpHadamardRouter {
    pub fn new(cfg: &RouterConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        let (h, dh, e) = (cfg.hidden_size, cfg.hadamard_width(), cfg.num_experts);
        let w1 = rng_normal(&mut rng, &[dh, h], 0.0, cfg.init_std)?;
        let projection = if dh != h {
            Some(rng_normal(&mut rng, &[dh, h], 0.0, cfg.init_std)?)
        } else {
            None
        };
        let w2 = if cfg.hadamard_head_init {
            hadamard_rows(e, dh)
        } else {
            rng_normal(&mut rng, &[e, dh], 0.0, cfg.init_std)?
        };
        Self::from_parts(
            w1,
            Tensor::zeros(&[dh]),
            projection,
            w2,
            Tensor::zeros(&[e]),
            cfg.activation,
            cfg.router_top_k,
            cfg.orth_lambda,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        w1: Tensor,
        b1: Tensor,
        projection: Option<Tensor>,
        w2: Tensor,
        b2: Tensor,
        activation: Activation,
        router_top_k: usize,
        orth_lambda: f64,
    ) -> Result<Self> {
        let (dh, h) = (w1.rows(), w1.cols());
        if w1.rank() != 2 || b1.len() != dh || w2.cols() != dh || b2.len() != w2.rows() {
            return Err(shape_err!("mlp-hadamard: inconsistent block shapes"));
        }
        match &projection {
            Some(p) if p.shape() != w1.shape() => {
                return Err(shape_err!("projection must be [{}, {}]", dh, h));
            }
            None if dh != h => {
                return Err(shape_err!(
                    "hidden width {} != {} needs a projection",
                    dh,
                    h
                ));
            }
            _ => {}
        }
        if router_top_k == 0 {
            return Err(shape_err!("router_top_k must be >= 1"));
        }
        Ok(Self {
            w1,
            b1,
            projection,
            w2,
            b2,
            activation,
            router_top_k,
            orth_lambda,
            mask_grad: MaskGrad::StraightThrough,
        })
    }

    fn kept(&self) -> usize {
        self.router_top_k.min(self.w2.rows())
    }

    /// Routing logits before softmax and masking.
    pub fn record_logits(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId> {
        let h = tape.linear(x, params[0])?;
        let h = tape.add_bias(h, params[1])?;
        let h = tape.activation(h, self.activation);
        let (gate_src, rest) = match self.projection {
            Some(_) => (tape.linear(x, params[2])?, &params[3..]),
            None => (x, &params[2..]),
        };
        let h = tape.mul(h, gate_src)?;
        let logits = tape.linear(h, rest[0])?;
        tape.add_bias(logits, rest[1])
    }

    /// `orth_lambda * ||W2 W2ᵀ - I||_F²`.
    pub fn orthogonality_penalty(&self) -> f64 {
        if self.orth_lambda == 0.0 {
            return 0.0;
        }
        let e = self.w2.rows();
        let mut total = 0.0;
        for i in 0..e {
            for j in 0..e {
                let g = crate::grad::dot(self.w2.row(i), self.w2.row(j));
                let d = g - if i == j { 1.0 } else { 0.0 };
                total += d * d;
            }
        }
        self.orth_lambda * total
    }

    fn w2_index(&self) -> usize {
        if self.projection.is_some() {
            3
        } else {
            2
        }
    }
}

impl Parameterized for MlpHadamardRouter {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        let mut p = vec![("w1", &self.w1), ("b1", &self.b1)];
        if let Some(proj) = &self.projection {
            p.push(("projection", proj));
        }
        p.push(("w2", &self.w2));
        p.push(("b2", &self.b2));
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.w1, &mut self.b1];
        if let Some(proj) = &mut self.projection {
            p.push(proj);
        }
        p.push(&mut self.w2);
        p.push(&mut self.b2);
        p
    }
}

impl Router for MlpHadamardRouter {
    fn kind(&self) -> RouterKind {
        RouterKind::MlpHadamard
    }

    fn hidden_size(&self) -> usize {
        self.w1.cols()
    }

    fn num_experts(&self) -> usize {
        self.w2.rows()
    }

    fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let logits = self.record_logits(tape, x, params)?;
        let p = tape.softmax(logits, 1.0)?;
        tape.topk_mask(p, self.kept(), self.mask_grad)
    }

    fn record_regularizer(&self, tape: &mut Tape<'_>, params: &[NodeId]) -> Result<Option<NodeId>> {
        if self.orth_lambda == 0.0 {
            return Ok(None);
        }
        let w2 = params[self.w2_index()];
        let gram = tape.linear(w2, w2)?;
        let neg_eye = tape.constant(Tensor::eye(self.w2.rows()).map(|v| -v));
        let diff = tape.add(gram, neg_eye)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        Ok(Some(tape.scale(total, self.orth_lambda)))
    }
}
