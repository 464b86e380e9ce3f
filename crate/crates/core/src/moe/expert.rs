use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::grad::{NodeId, Parameterized, Tape};
use crate::numcore::{rng_normal, Activation, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    /// `W_out act(W_in x + b_in) + b_out`.
    #[default]
    Standard,
    /// `(silu(x W) ⊙ x V) W2`.
    Swiglu,
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ExpertKind::Standard),
            "swiglu" => Ok(ExpertKind::Swiglu),
            _ => Err(param_err!(
                "expert kind must be standard or swiglu, got '{}'",
                s
            )),
        }
    }
}

/// Feed-forward expert mapping width `H` back to `H`.
///
/// Weights are stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertFfn {
    Standard {
        w_in: Tensor,
        b_in: Tensor,
        w_out: Tensor,
        b_out: Tensor,
        activation: Activation,
    },
    Swiglu {
        w: Tensor,
        v: Tensor,
        w2: Tensor,
    },
}

impl ExpertFfn {
    pub fn standard(
        w_in: Tensor,
        b_in: Tensor,
        w_out: Tensor,
        b_out: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        let (d_ff, h) = (w_in.rows(), w_in.cols());
        if w_in.rank() != 2 || w_out.rank() != 2 {
            return Err(shape_err!("expert weights must be matrices"));
        }
        if b_in.len() != d_ff || w_out.rows() != h || w_out.cols() != d_ff || b_out.len() != h {
            return Err(shape_err!(
                "standard expert: w_in {:?}, b_in {:?}, w_out {:?}, b_out {:?} do not agree",
                w_in.shape(),
                b_in.shape(),
                w_out.shape(),
                b_out.shape()
            ));
        }
        Ok(ExpertFfn::Standard {
            w_in,
            b_in: b_in.reshape(&[d_ff])?,
            w_out,
            b_out: b_out.reshape(&[h])?,
            activation,
        })
    }

    pub fn swiglu(w: Tensor, v: Tensor, w2: Tensor) -> Result<Self> {
        if w.rank() != 2 || w.shape() != v.shape() || w2.rank() != 2 {
            return Err(shape_err!("swiglu: w and v must be equal-shape matrices"));
        }
        if w2.rows() != w.cols() || w2.cols() != w.rows() {
            return Err(shape_err!(
                "swiglu: w2 {:?} must be [{}, {}]",
                w2.shape(),
                w.cols(),
                w.rows()
            ));
        }
        Ok(ExpertFfn::Swiglu { w, v, w2 })
    }

    /// Gaussian-initialized expert with zero biases.
    pub fn random(
        kind: ExpertKind,
        hidden: usize,
        d_ff: usize,
        activation: Activation,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        match kind {
            ExpertKind::Standard => Self::standard(
                rng_normal(rng, &[d_ff, hidden], 0.0, std)?,
                Tensor::zeros(&[d_ff]),
                rng_normal(rng, &[hidden, d_ff], 0.0, std)?,
                Tensor::zeros(&[hidden]),
                activation,
            ),
            ExpertKind::Swiglu => Self::swiglu(
                rng_normal(rng, &[d_ff, hidden], 0.0, std)?,
                rng_normal(rng, &[d_ff, hidden], 0.0, std)?,
                rng_normal(rng, &[hidden, d_ff], 0.0, std)?,
            ),
        }
    }

    pub fn kind(&self) -> ExpertKind {
        match self {
            ExpertFfn::Standard { .. } => ExpertKind::Standard,
            ExpertFfn::Swiglu { .. } => ExpertKind::Swiglu,
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            ExpertFfn::Standard { w_in, .. } => w_in.cols(),
            ExpertFfn::Swiglu { w, .. } => w.cols(),
        }
    }

    /// Records the expert on rows of `x`; `params` come from [`Parameterized::bind`].
    pub fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        match self {
            ExpertFfn::Standard { activation, .. } => {
                let h = tape.linear(x, params[0])?;
                let h = tape.add_bias(h, params[1])?;
                let h = tape.activation(h, *activation);
                let y = tape.linear(h, params[2])?;
                tape.add_bias(y, params[3])
            }
            ExpertFfn::Swiglu { .. } => {
                let gate = tape.linear(x, params[0])?;
                let gate = tape.activation(gate, Activation::Silu);
                let up = tape.linear(x, params[1])?;
                let h = tape.mul(gate, up)?;
                tape.linear(h, params[2])
            }
        }
    }

    /// Applies the expert to a single token (rank 1) or to every row.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.hidden_size() {
            return Err(shape_err!(
                "expert expects width {}, got {:?}",
                self.hidden_size(),
                x.shape()
            ));
        }
        let mut tape = Tape::new();
        let xn = tape.constant_ref(x);
        let params = self.bind(&mut tape, false);
        let y = self.record(&mut tape, xn, &params)?;
        let out = tape.value(y).clone();
        out.reshape(x.shape())
    }
}

impl Parameterized for ExpertFfn {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            ExpertFfn::Standard {
                w_in,
                b_in,
                w_out,
                b_out,
                ..
            } => vec![
                ("w_in", w_in),
                ("b_in", b_in),
                ("w_out", w_out),
                ("b_out", b_out),
            ],
            ExpertFfn::Swiglu { w, v, w2 } => vec![("w", w), ("v", v), ("w2", w2)],
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ExpertFfn::Standard {
                w_in,
                b_in,
                w_out,
                b_out,
                ..
            } => vec![w_in, b_in, w_out, b_out],
            ExpertFfn::Swiglu { w, v, w2 } => vec![w, v, w2],
        }
    }
}
