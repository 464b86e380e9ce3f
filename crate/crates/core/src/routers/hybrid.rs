use alloc::vec;
use alloc::vec::Vec;

use super::{AttentionRouter, HybridMix, LinearRouter, Router, RouterConfig, RouterKind};
use crate::error::{shape_err, Result};
use crate::grad::{NodeId, Parameterized, Tape};
use crate::numcore::{rng_normal, softmax, Rng, Tensor};

/// Convex combination of linear logits and attention scores.
///
/// `logits = w_lin * (W x) + w_att * scores(x)` with
/// `(w_lin, w_att) = softmax(mix)` for a learned mix, then a softmax over
/// experts.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridRouter {
    /// Bias-free linear path.
    pub linear: LinearRouter,
    pub attention: AttentionRouter,
    /// `[2]` learnable logits; `None` when the weighting is fixed.
    pub mix: Option<Tensor>,
    /// Fixed weight on the linear path, used when `mix` is `None`.
    pub fixed_weight: f64,
}

impl HybridRouter {
    pub fn new(cfg: &RouterConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        let weight = rng_normal(
            &mut rng,
            &[cfg.num_experts, cfg.hidden_size],
            0.0,
            cfg.init_std,
        )?;
        let linear = LinearRouter::from_parts(weight, None)?;
        let attention = AttentionRouter::init(cfg, &mut rng)?;
        let (mix, fixed_weight) = match cfg.hybrid_mix {
            HybridMix::Learned => (Some(Tensor::zeros(&[2])), 0.5),
            HybridMix::Fixed(w) => (None, w),
        };
        Self::from_parts(linear, attention, mix, fixed_weight)
    }

    pub fn from_parts(
        linear: LinearRouter,
        attention: AttentionRouter,
        mix: Option<Tensor>,
        fixed_weight: f64,
    ) -> Result<Self> {
        if linear.hidden_size() != attention.hidden_size()
            || linear.num_experts() != attention.num_experts()
        {
            return Err(shape_err!(
                "hybrid: linear and attention paths disagree on H or E"
            ));
        }
        if linear.bias.is_some() {
            return Err(shape_err!("hybrid: linear path is bias-free"));
        }
        if let Some(m) = &mix {
            if m.len() != 2 {
                return Err(shape_err!("hybrid mix must have 2 logits"));
            }
        }
        Ok(Self {
            linear,
            attention,
            mix,
            fixed_weight,
        })
    }

    /// Current `(w_lin, w_att)`.
    pub fn mix_weights(&self) -> (f64, f64) {
        match &self.mix {
            Some(m) => {
                let w = softmax(m, 1.0).expect("mix has two finite logits");
                (w.data()[0], w.data()[1])
            }
            None => (self.fixed_weight, 1.0 - self.fixed_weight),
        }
    }

    /// Combined pre-softmax logits.
    pub fn record_logits(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId> {
        let lin = self.linear.record_logits(tape, x, &params[0..1])?;
        let att = self.attention.record_scores(tape, x, &params[1..3])?;
        match self.mix {
            Some(_) => {
                let w = tape.softmax(params[3], 1.0)?;
                let a = tape.scale_by_entry(lin, w, 0)?;
                let b = tape.scale_by_entry(att, w, 1)?;
                tape.add(a, b)
            }
            None => {
                let a = tape.scale(lin, self.fixed_weight);
                let b = tape.scale(att, 1.0 - self.fixed_weight);
                tape.add(a, b)
            }
        }
    }
}

impl Parameterized for HybridRouter {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        let mut p = vec![
            ("linear.weight", &self.linear.weight),
            ("attention.query", &self.attention.query),
            ("attention.keys", &self.attention.keys),
        ];
        if let Some(m) = &self.mix {
            p.push(("mix", m));
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![
            &mut self.linear.weight,
            &mut self.attention.query,
            &mut self.attention.keys,
        ];
        if let Some(m) = &mut self.mix {
            p.push(m);
        }
        p
    }
}

impl Router for HybridRouter {
    fn kind(&self) -> RouterKind {
        RouterKind::Hybrid
    }

    fn hidden_size(&self) -> usize {
        self.linear.hidden_size()
    }

    fn num_experts(&self) -> usize {
        self.linear.num_experts()
    }

    fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let logits = self.record_logits(tape, x, params)?;
        tape.softmax(logits, 1.0)
    }
}
