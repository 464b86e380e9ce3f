//! Router variants behind one interface: token states in, one probability
//! distribution over experts per token out.
//!
//! Every router records its forward pass on a [`Tape`], so the same code
//! serves inference ([`Router::probabilities`]) and training.

mod attention;
mod config;
mod hadamard;
mod hash;
mod hybrid;
mod linear;
mod mlp;
mod selfsup;

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub use attention::AttentionRouter;
pub use config::{HashAlgorithm, HybridMix, KeyInit, RouterConfig};
pub use hadamard::{hadamard_rows, MlpHadamardRouter};
pub use hash::HashRouter;
pub use hybrid::HybridRouter;
pub use linear::LinearRouter;
pub use mlp::MlpRouter;
pub use selfsup::{contrastive_loss, PretrainOptions, SelfSupervisedRouter};

use crate::error::{param_err, shape_err, Error, Result};
use crate::grad::{NodeId, Parameterized, Tape};
use crate::numcore::Tensor;

/// Epsilon guarding query normalization.
pub(crate) const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterKind {
    Linear,
    Attention,
    Mlp,
    Hybrid,
    MlpHadamard,
    Hash,
    SelfSupervised,
}

impl RouterKind {
    pub const ALL: [RouterKind; 7] = [
        RouterKind::Linear,
        RouterKind::Attention,
        RouterKind::Mlp,
        RouterKind::Hybrid,
        RouterKind::MlpHadamard,
        RouterKind::Hash,
        RouterKind::SelfSupervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Linear => "linear",
            RouterKind::Attention => "attention",
            RouterKind::Mlp => "mlp",
            RouterKind::Hybrid => "hybrid",
            RouterKind::MlpHadamard => "mlp-hadamard",
            RouterKind::Hash => "hash",
            RouterKind::SelfSupervised => "self-supervised",
        }
    }

    /// Comma-separated list of every router name.
    pub fn names() -> alloc::string::String {
        let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
        names.join(", ")
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| param_err!("unknown router '{}'; valid routers: {}", s, Self::names()))
    }
}

/// Common router interface.
pub trait Router: Parameterized {
    fn kind(&self) -> RouterKind;

    fn hidden_size(&self) -> usize;

    fn num_experts(&self) -> usize;

    /// Records `[N, E]` probabilities for token rows `x: [N, H]`. `params`
    /// are the ids returned by [`Parameterized::bind`].
    fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId>;

    /// Extra training penalty on the router's own parameters, if any.
    fn record_regularizer(
        &self,
        _tape: &mut Tape<'_>,
        _params: &[NodeId],
    ) -> Result<Option<NodeId>> {
        Ok(None)
    }

    /// Probabilities for `x` of shape `[..., H]`, returned as `[..., E]`.
    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        check_width(x, self.hidden_size())?;
        let mut tape = Tape::new();
        let xn = tape.constant_ref(x);
        let params = self.bind(&mut tape, false);
        let p = self.record(&mut tape, xn, &params)?;
        let mut shape: Vec<usize> = x.shape()[..x.rank() - 1].to_vec();
        shape.push(self.num_experts());
        tape.value(p).clone().reshape(&shape)
    }
}

pub(crate) fn check_width(x: &Tensor, hidden: usize) -> Result<()> {
    if x.cols() != hidden || x.is_empty() {
        return Err(shape_err!(
            "router expects last dimension {}, got shape {:?}",
            hidden,
            x.shape()
        ));
    }
    Ok(())
}

/// Any of the seven routers.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyRouter {
    Linear(LinearRouter),
    Attention(AttentionRouter),
    Mlp(MlpRouter),
    Hybrid(HybridRouter),
    MlpHadamard(MlpHadamardRouter),
    Hash(HashRouter),
    SelfSupervised(SelfSupervisedRouter),
}

macro_rules! each_router {
    ($self:expr, $r:ident => $body:expr) => {
        match $self {
            AnyRouter::Linear($r) => $body,
            AnyRouter::Attention($r) => $body,
            AnyRouter::Mlp($r) => $body,
            AnyRouter::Hybrid($r) => $body,
            AnyRouter::MlpHadamard($r) => $body,
            AnyRouter::Hash($r) => $body,
            AnyRouter::SelfSupervised($r) => $body,
        }
    };
}

impl AnyRouter {
    /// Randomly initialized router of `kind` seeded by `cfg.seed`.
    pub fn build(kind: RouterKind, cfg: &RouterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match kind {
            RouterKind::Linear => AnyRouter::Linear(LinearRouter::new(cfg)?),
            RouterKind::Attention => AnyRouter::Attention(AttentionRouter::new(cfg)?),
            RouterKind::Mlp => AnyRouter::Mlp(MlpRouter::new(cfg)?),
            RouterKind::Hybrid => AnyRouter::Hybrid(HybridRouter::new(cfg)?),
            RouterKind::MlpHadamard => AnyRouter::MlpHadamard(MlpHadamardRouter::new(cfg)?),
            RouterKind::Hash => AnyRouter::Hash(HashRouter::new(cfg)?),
            RouterKind::SelfSupervised => {
                AnyRouter::SelfSupervised(SelfSupervisedRouter::new(cfg)?)
            }
        })
    }
}

impl Parameterized for AnyRouter {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        each_router!(self, r => r.parameters())
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        each_router!(self, r => r.parameters_mut())
    }
}

impl Router for AnyRouter {
    fn kind(&self) -> RouterKind {
        each_router!(self, r => r.kind())
    }

    fn hidden_size(&self) -> usize {
        each_router!(self, r => r.hidden_size())
    }

    fn num_experts(&self) -> usize {
        each_router!(self, r => r.num_experts())
    }

    fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        each_router!(self, r => r.record(tape, x, params))
    }

    fn record_regularizer(&self, tape: &mut Tape<'_>, params: &[NodeId]) -> Result<Option<NodeId>> {
        each_router!(self, r => r.record_regularizer(tape, params))
    }
}
