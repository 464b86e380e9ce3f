use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RoutingDecision;
use crate::error::{param_err, shape_err, Error, Result};
use crate::numcore::Tensor;

/// Which load-balancing formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxForm {
    /// `alpha * E * sum_e f_e * g_e`.
    Product,
    /// `alpha * E * sum_e g_e^2 * f_e` (Switch-style).
    #[default]
    Squared,
}

impl fmt::Display for AuxForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxForm::Product => "product",
            AuxForm::Squared => "squared",
        })
    }
}

impl FromStr for AuxForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(AuxForm::Product),
            "squared" => Ok(AuxForm::Squared),
            _ => Err(param_err!(
                "aux form must be product or squared, got '{}'",
                s
            )),
        }
    }
}

/// `f_e`: top-k slots dispatched to expert `e`, divided by the token count.
/// Sums to `k` over experts.
pub fn dispatch_fractions(selection: &[usize], tokens: usize, num_experts: usize) -> Vec<f64> {
    let mut f = vec![0.0; num_experts];
    for &e in selection {
        f[e] += 1.0;
    }
    let n = tokens.max(1) as f64;
    for v in &mut f {
        *v /= n;
    }
    f
}

/// `g_e`: mean router probability of expert `e` over rows of `probs`.
pub fn importance(probs: &Tensor) -> Vec<f64> {
    let (n, e) = (probs.rows(), probs.cols());
    let mut g = vec![0.0; e];
    for r in 0..n {
        for (gj, p) in g.iter_mut().zip(probs.row(r)) {
            *gj += p;
        }
    }
    for v in &mut g {
        *v /= n.max(1) as f64;
    }
    g
}

pub fn aux_from_stats(f: &[f64], g: &[f64], alpha: f64, form: AuxForm) -> f64 {
    let e = f.len() as f64;
    let s: f64 = f
        .iter()
        .zip(g)
        .map(|(fe, ge)| match form {
            AuxForm::Product => fe * ge,
            AuxForm::Squared => ge * ge * fe,
        })
        .sum();
    alpha * e * s
}

/// Load-balancing loss for router probabilities `probs` and their dispatch.
pub fn aux_loss(
    probs: &Tensor,
    decision: &RoutingDecision,
    alpha: f64,
    form: AuxForm,
) -> Result<f64> {
    if probs.cols() != decision.num_experts() || probs.rows() != decision.tokens() {
        return Err(shape_err!(
            "probabilities {:?} inconsistent with a decision over {} tokens x {} experts",
            probs.shape(),
            decision.tokens(),
            decision.num_experts()
        ));
    }
    let f = dispatch_fractions(
        decision.indices(),
        decision.tokens(),
        decision.num_experts(),
    );
    let g = importance(probs);
    Ok(aux_from_stats(&f, &g, alpha, form))
}
