use alloc::vec::Vec;

use crate::error::{param_err, shape_err, Result};
use crate::numcore::{topk_indices, Tensor};

/// Per-token top-k experts, their normalized combine weights and the full
/// probability rows they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    lead: Vec<usize>,
    k: usize,
    indices: Vec<usize>,
    weights: Tensor,
    probabilities: Tensor,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.probabilities.rows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_experts(&self) -> usize {
        self.probabilities.cols()
    }

    /// Leading shape (`[B, S]` for rank-3 input).
    pub fn lead_shape(&self) -> &[usize] {
        &self.lead
    }

    /// All selected indices, `tokens * k`, descending probability per token.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Combine weights shaped like the input with the last axis replaced by `k`.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn probabilities(&self) -> &Tensor {
        &self.probabilities
    }

    pub fn token_indices(&self, t: usize) -> &[usize] {
        &self.indices[t * self.k..(t + 1) * self.k]
    }

    pub fn token_weights(&self, t: usize) -> &[f64] {
        self.weights.row(t)
    }

    /// Raw probabilities of the selected experts for token `t`.
    pub fn selected_probabilities(&self, t: usize) -> impl Iterator<Item = f64> + '_ {
        let row = self.probabilities.row(t);
        self.token_indices(t).iter().map(move |&e| row[e])
    }
}

/// Picks the `k` most probable experts per row of `probs` (ties to the
/// lower index) and renormalizes their probabilities to sum to one.
pub fn select_topk(probs: &Tensor, k: usize) -> Result<RoutingDecision> {
    let e = probs.cols();
    if k == 0 || k > e {
        return Err(param_err!("k must be in 1..={}, got {}", e, k));
    }
    if probs.rows() == 0 {
        return Err(shape_err!("no tokens to route"));
    }
    let n = probs.rows();
    let mut indices = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n * k);
    for t in 0..n {
        let row = probs.row(t);
        let sel = topk_indices(row, k);
        let total: f64 = sel.iter().map(|&j| row[j]).sum();
        if !(total > 0.0) {
            return Err(param_err!(
                "token {} has no probability mass on its top-{}",
                t,
                k
            ));
        }
        weights.extend(sel.iter().map(|&j| row[j] / total));
        indices.extend_from_slice(&sel);
    }
    let lead: Vec<usize> = probs.shape()[..probs.rank() - 1].to_vec();
    let mut wshape = lead.clone();
    wshape.push(k);
    if wshape.len() == 1 {
        wshape.insert(0, 1);
    }
    Ok(RoutingDecision {
        lead,
        k,
        indices,
        weights: Tensor::from_parts(wshape, weights),
        probabilities: probs.clone(),
    })
}
