use alloc::vec;
use alloc::vec::Vec;

use super::{Router, RouterConfig, RouterKind, NORM_EPS};
use crate::error::{param_err, shape_err, Result};
use crate::grad::{NodeId, Parameterized, Tape};
use crate::numcore::{rng_normal, Activation, Rng, Tensor};
use crate::optim::Adam;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(crate::grad::dot(a, a)).max(NORM_EPS);
    let nb = libm::sqrt(crate::grad::dot(b, b)).max(NORM_EPS);
    crate::grad::dot(a, b) / (na * nb)
}

/// InfoNCE loss of one anchor: `-log softmax` of the positive's cosine
/// similarity among the positive and all negatives, at temperature `tau`.
pub fn contrastive_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[Tensor],
    tau: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(param_err!("contrastive loss needs at least one negative"));
    }
    if !(tau > 0.0) {
        return Err(param_err!("temperature must be positive, got {}", tau));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(shape_err!("contrastive loss: feature widths differ"));
    }
    let a = anchor.data();
    let logits: Vec<f64> = core::iter::once(positive)
        .chain(negatives)
        .map(|t| cosine(a, t.data()) / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(logits.iter().map(|l| libm::exp(l - max)).sum::<f64>());
    Ok(lse - logits[0])
}

/// Settings for [`SelfSupervisedRouter::pretrain`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    /// Anchors per step. Every other view in the batch is a negative.
    pub batch: usize,
    /// Std of the Gaussian noise producing each view. Structure finer than
    /// this is treated as nuisance and not separated.
    pub noise_std: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 32,
            noise_std: 0.5,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Feature extractor `f(x) = Wb act(Wa x + ba) + bb` followed by the
/// routing head `softmax(W_route f(x) + b_route)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSupervisedRouter {
    /// `[d_hidden, H]`
    pub wa: Tensor,
    pub ba: Tensor,
    /// `[d_ss, d_hidden]`
    pub wb: Tensor,
    pub bb: Tensor,
    /// `[E, d_ss]`
    pub w_route: Tensor,
    pub b_route: Tensor,
    pub activation: Activation,
    /// Contrastive temperature.
    pub tau: f64,
}

impl SelfSupervisedRouter {
    pub fn new(cfg: &RouterConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        let (h, dh, ds, e) = (cfg.hidden_size, cfg.ss_hidden, cfg.ss_dim, cfg.num_experts);
        // the extractor is drawn at fan-in scale so features keep a useful
        // magnitude before any pretraining
        let wa = rng_normal(&mut rng, &[dh, h], 0.0, 1.0 / libm::sqrt(h as f64))?;
        let wb = rng_normal(&mut rng, &[ds, dh], 0.0, 1.0 / libm::sqrt(dh as f64))?;
        let w_route = rng_normal(&mut rng, &[e, ds], 0.0, cfg.init_std)?;
        Self::from_parts(
            wa,
            Tensor::zeros(&[dh]),
            wb,
            Tensor::zeros(&[ds]),
            w_route,
            Tensor::zeros(&[e]),
            cfg.activation,
            cfg.ss_temperature,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        wa: Tensor,
        ba: Tensor,
        wb: Tensor,
        bb: Tensor,
        w_route: Tensor,
        b_route: Tensor,
        activation: Activation,
        tau: f64,
    ) -> Result<Self> {
        if wa.rank() != 2
            || wb.rank() != 2
            || w_route.rank() != 2
            || ba.len() != wa.rows()
            || wb.cols() != wa.rows()
            || bb.len() != wb.rows()
            || w_route.cols() != wb.rows()
            || b_route.len() != w_route.rows()
        {
            return Err(shape_err!(
                "self-supervised router: extractor output {} does not feed head {:?}",
                wb.rows(),
                w_route.shape()
            ));
        }
        if !(tau > 0.0) {
            return Err(param_err!("temperature must be positive, got {}", tau));
        }
        Ok(Self {
            wa,
            ba,
            wb,
            bb,
            w_route,
            b_route,
            activation,
            tau,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.wb.rows()
    }

    fn record_features(&self, tape: &mut Tape<'_>, x: NodeId, p: &[NodeId]) -> Result<NodeId> {
        let h = tape.linear(x, p[0])?;
        let h = tape.add_bias(h, p[1])?;
        let h = tape.activation(h, self.activation);
        let z = tape.linear(h, p[2])?;
        tape.add_bias(z, p[3])
    }

    /// Extracted features `[..., d_ss]` for `x: [..., H]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        super::check_width(x, self.hidden_size())?;
        let mut tape = Tape::new();
        let xn = tape.constant_ref(x);
        let params = self.bind(&mut tape, false);
        let z = self.record_features(&mut tape, xn, &params)?;
        let mut shape = x.shape()[..x.rank() - 1].to_vec();
        shape.push(self.feature_dim());
        tape.value(z).clone().reshape(&shape)
    }

    /// In-batch contrastive loss on the tape: row `i` of `za` is the anchor
    /// and row `i` of `zb` its positive, all other rows of `zb` negatives.
    pub fn record_contrastive(
        &self,
        tape: &mut Tape<'_>,
        za: NodeId,
        zb: NodeId,
    ) -> Result<NodeId> {
        let n = tape.value(za).rows();
        let a = tape.l2_normalize(za, NORM_EPS)?;
        let b = tape.l2_normalize(zb, NORM_EPS)?;
        let sim = tape.linear(a, b)?;
        let logits = tape.scale(sim, 1.0 / self.tau);
        tape.cross_entropy(logits, (0..n).collect())
    }

    /// Trains the extractor alone with the contrastive objective. Views of
    /// a token are the token plus independent Gaussian noise. Returns the
    /// per-step losses.
    pub fn pretrain(&mut self, tokens: &Tensor, opts: &PretrainOptions) -> Result<Vec<f64>> {
        super::check_width(tokens, self.hidden_size())?;
        let n = tokens.len() / self.hidden_size();
        if n < 2 || opts.batch < 2 {
            return Err(param_err!(
                "contrastive pretraining needs at least two tokens per batch"
            ));
        }
        let tokens = tokens.to_matrix();
        let h = self.hidden_size();
        let batch = opts.batch.min(n);
        let mut rng = Rng::new(opts.seed);
        let mut opt = Adam::new(opts.lr);
        let mut losses = Vec::with_capacity(opts.steps);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..opts.steps {
            rng.shuffle(&mut order);
            let mut views = [Vec::with_capacity(batch * h), Vec::with_capacity(batch * h)];
            for &i in &order[..batch] {
                for view in views.iter_mut() {
                    view.extend(
                        tokens
                            .row(i)
                            .iter()
                            .map(|v| v + opts.noise_std * rng.normal()),
                    );
                }
            }
            let [va, vb] = views;
            let va = Tensor::new(&[batch, h], va)?;
            let vb = Tensor::new(&[batch, h], vb)?;
            let (loss, grads) = {
                let mut tape = Tape::new();
                let p: Vec<NodeId> = [&self.wa, &self.ba, &self.wb, &self.bb]
                    .into_iter()
                    .map(|t| tape.parameter(t))
                    .collect();
                let xa = tape.constant(va);
                let xb = tape.constant(vb);
                let za = self.record_features(&mut tape, xa, &p)?;
                let zb = self.record_features(&mut tape, xb, &p)?;
                let loss = self.record_contrastive(&mut tape, za, zb)?;
                let g = tape.backward(loss)?;
                let grads: Vec<Tensor> = p
                    .iter()
                    .zip([&self.wa, &self.ba, &self.wb, &self.bb])
                    .map(|(&id, t)| g.wrt(id, t))
                    .collect();
                (tape.scalar(loss), grads)
            };
            losses.push(loss);
            opt.step(
                &mut [&mut self.wa, &mut self.ba, &mut self.wb, &mut self.bb],
                &grads,
            )?;
        }
        Ok(losses)
    }
}

impl Parameterized for SelfSupervisedRouter {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("wa", &self.wa),
            ("ba", &self.ba),
            ("wb", &self.wb),
            ("bb", &self.bb),
            ("w_route", &self.w_route),
            ("b_route", &self.b_route),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wa,
            &mut self.ba,
            &mut self.wb,
            &mut self.bb,
            &mut self.w_route,
            &mut self.b_route,
        ]
    }
}

impl Router for SelfSupervisedRouter {
    fn kind(&self) -> RouterKind {
        RouterKind::SelfSupervised
    }

    fn hidden_size(&self) -> usize {
        self.wa.cols()
    }

    fn num_experts(&self) -> usize {
        self.w_route.rows()
    }

    fn record(&self, tape: &mut Tape<'_>, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let z = self.record_features(tape, x, params)?;
        let logits = tape.linear(z, params[4])?;
        let logits = tape.add_bias(logits, params[5])?;
        tape.softmax(logits, 1.0)
    }
}
