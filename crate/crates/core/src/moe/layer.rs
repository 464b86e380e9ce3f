use alloc::vec;
use alloc::vec::Vec;

use super::{select_topk, AuxForm, ExpertFfn, ExpertKind, RoutingDecision};
use crate::error::{param_err, shape_err, Result};
use crate::grad::{MaskGrad, NodeId, Parameterized, Tape};
use crate::numcore::{Activation, Rng, Tensor};
use crate::routers::{check_width, AnyRouter, Router, RouterConfig, RouterKind};

/// Default load-balancing weight.
pub const DEFAULT_ALPHA_AUX: f64 = 0.005;

/// Tape ids of a bound layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub router: Vec<NodeId>,
    pub experts: Vec<Vec<NodeId>>,
}

impl LayerParams {
    /// Every id, router first, then experts in order.
    pub fn all(&self) -> Vec<NodeId> {
        let mut ids = self.router.clone();
        ids.extend(self.experts.iter().flatten());
        ids
    }
}

/// Nodes recorded by [`MoeLayer::record`].
#[derive(Debug, Clone, Copy)]
pub struct MoeNodes {
    /// `[N, H]` combined expert output.
    pub output: NodeId,
    /// `[N, E]` router probabilities.
    pub probs: NodeId,
    /// `[N, E]` combine weights, zero outside the top k.
    pub gates: NodeId,
    /// Scaled auxiliary loss.
    pub aux: NodeId,
    /// Router-specific penalty, if the router defines one.
    pub regularizer: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    /// Same shape as the input.
    pub output: Tensor,
    pub decision: RoutingDecision,
    /// Scaled auxiliary loss.
    pub aux: f64,
}

/// A router plus `E` experts, combining the top `k` per token.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub router: AnyRouter,
    pub experts: Vec<ExpertFfn>,
    pub k: usize,
    pub alpha_aux: f64,
    pub aux_form: AuxForm,
    /// Backward rule of the top-k combine mask.
    pub mask_grad: MaskGrad,
}

impl MoeLayer {
    pub fn new(router: AnyRouter, experts: Vec<ExpertFfn>, k: usize) -> Result<Self> {
        let e = router.num_experts();
        if experts.len() != e {
            return Err(param_err!(
                "router has {} experts but {} were given",
                e,
                experts.len()
            ));
        }
        if k == 0 || k > e {
            return Err(param_err!("k must be in 1..={}, got {}", e, k));
        }
        if let Some(bad) = experts
            .iter()
            .find(|x| x.hidden_size() != router.hidden_size())
        {
            return Err(shape_err!(
                "expert width {} != router width {}",
                bad.hidden_size(),
                router.hidden_size()
            ));
        }
        Ok(Self {
            router,
            experts,
            k,
            alpha_aux: DEFAULT_ALPHA_AUX,
            aux_form: AuxForm::default(),
            mask_grad: MaskGrad::StraightThrough,
        })
    }

    /// Router built from `cfg` plus `cfg.num_experts` Gaussian experts. The
    /// experts draw from a stream forked off `cfg.seed`.
    pub fn random(
        kind: RouterKind,
        cfg: &RouterConfig,
        expert_kind: ExpertKind,
        d_ff: usize,
        activation: Activation,
        expert_std: f64,
    ) -> Result<Self> {
        let router = AnyRouter::build(kind, cfg)?;
        let mut rng = Rng::new(cfg.seed).fork(0x4558_5045_5254);
        let experts = (0..cfg.num_experts)
            .map(|_| {
                ExpertFfn::random(
                    expert_kind,
                    cfg.hidden_size,
                    d_ff,
                    activation,
                    expert_std,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(router, experts, cfg.top_k)
    }

    pub fn hidden_size(&self) -> usize {
        self.router.hidden_size()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Copies one standard FFN into every expert.
    pub fn load_bert_style_experts(
        &mut self,
        w_int: &Tensor,
        b_int: &Tensor,
        w_out: &Tensor,
        b_out: &Tensor,
    ) -> Result<()> {
        let activation = match self.experts.first() {
            Some(ExpertFfn::Standard { activation, .. }) => *activation,
            _ => Activation::Gelu,
        };
        let ffn = ExpertFfn::standard(
            w_int.clone(),
            b_int.clone(),
            w_out.clone(),
            b_out.clone(),
            activation,
        )?;
        if ffn.hidden_size() != self.hidden_size() {
            return Err(shape_err!(
                "FFN width {} != layer width {}",
                ffn.hidden_size(),
                self.hidden_size()
            ));
        }
        let n = self.experts.len();
        self.experts = vec![ffn; n];
        Ok(())
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> LayerParams {
        LayerParams {
            router: self.router.bind(tape, trainable),
            experts: self
                .experts
                .iter()
                .map(|e| e.bind(tape, trainable))
                .collect(),
        }
    }

    /// Records routing, dispatch and combination for token rows `x: [N, H]`.
    ///
    /// Each expert sees only the rows routed to it, experts run in index
    /// order, and their scattered outputs are summed in that order.
    pub fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &LayerParams) -> Result<MoeNodes> {
        check_width(tape.value(x), self.hidden_size())?;
        let probs = self.router.record(tape, x, &params.router)?;
        let gates = tape.topk_mask(probs, self.k, self.mask_grad)?;
        let n = tape.value(x).rows();
        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); self.num_experts()];
        for (slot, &e) in tape.selection(gates).iter().enumerate() {
            routed[e].push(slot / self.k);
        }
        let mut output: Option<NodeId> = None;
        for (e, rows) in routed.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = tape.gather_rows(x, rows.clone())?;
            let ye = self.experts[e].record(tape, xe, &params.experts[e])?;
            let part = tape.weighted_scatter(ye, gates, rows, e)?;
            output = Some(match output {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let output = output.ok_or_else(|| shape_err!("no tokens among {} rows were routed", n))?;
        let aux = tape.aux_loss(probs, gates, self.alpha_aux, self.aux_form)?;
        let regularizer = self.router.record_regularizer(tape, &params.router)?;
        Ok(MoeNodes {
            output,
            probs,
            gates,
            aux,
            regularizer,
        })
    }

    /// Full forward for `x: [..., H]`.
    pub fn forward(&self, x: &Tensor) -> Result<MoeOutput> {
        check_width(x, self.hidden_size())?;
        let mut tape = Tape::new();
        let xn = tape.constant_ref(x);
        let params = self.bind(&mut tape, false);
        let nodes = self.record(&mut tape, xn, &params)?;
        let lead = &x.shape()[..x.rank() - 1];
        let mut pshape = lead.to_vec();
        pshape.push(self.num_experts());
        let probs = tape.value(nodes.probs).clone().reshape(&pshape)?;
        Ok(MoeOutput {
            output: tape.value(nodes.output).clone().reshape(x.shape())?,
            decision: select_topk(&probs, self.k)?,
            aux: tape.scalar(nodes.aux),
        })
    }
}

impl Parameterized for MoeLayer {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        let mut p = self.router.parameters();
        for e in &self.experts {
            p.extend(e.parameters());
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.router.parameters_mut();
        for e in &mut self.experts {
            p.extend(e.parameters_mut());
        }
        p
    }
}
