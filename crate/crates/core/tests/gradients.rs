//! Analytic gradients of task + aux + orthogonality loss against central
//! differences, for every trainable router inside an MoE layer.

use moelab_core::grad::{finite_diff_report, MaskGrad, Tape};
use moelab_core::moe::{ExpertKind, MoeLayer};
use moelab_core::numcore::{rng_normal, Rng};
use moelab_core::routers::{AnyRouter, Router, RouterConfig, RouterKind};
use moelab_core::{Activation, Tensor};

fn exact_layer(kind: RouterKind, seed: u64) -> MoeLayer {
    let cfg = RouterConfig {
        seed,
        init_std: 0.4,
        qk_dim: 4,
        mlp_hidden: 5,
        ss_hidden: 5,
        ss_dim: 4,
        router_top_k: 3,
        orth_lambda: 0.1,
        ..RouterConfig::with_dims(6, 5, 2)
    };
    let mut layer =
        MoeLayer::random(kind, &cfg, ExpertKind::Standard, 8, Activation::Gelu, 0.4).unwrap();
    layer.mask_grad = MaskGrad::Exact;
    // larger weight so the aux term is visible next to the task loss
    layer.alpha_aux = 0.1;
    if let AnyRouter::MlpHadamard(r) = &mut layer.router {
        r.mask_grad = MaskGrad::Exact;
    }
    layer
}

/// Smallest gap between the last kept and first dropped probability.
fn selection_margin(probs: &Tensor, k: usize) -> f64 {
    (0..probs.rows())
        .map(|t| {
            let mut row = probs.row(t).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            if k < row.len() {
                row[k - 1] - row[k]
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn check(kind: RouterKind) {
    let mut points = 0;
    let mut seed = 0;
    while points < 10 {
        seed += 1;
        let layer = exact_layer(kind, seed);
        let x = rng_normal(&mut Rng::new(1000 + seed), &[4, 6], 0.0, 1.0).unwrap();
        let probs = layer.router.probabilities(&x).unwrap();
        let cut = match &layer.router {
            AnyRouter::MlpHadamard(r) => selection_margin(&probs, r.router_top_k.min(layer.k)),
            _ => selection_margin(&probs, layer.k),
        };
        if cut < 1e-4 {
            continue;
        }
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let params = layer.bind(&mut tape, true);
        let nodes = layer.record(&mut tape, xn, &params).unwrap();
        let task = tape.cross_entropy(nodes.output, vec![0, 3, 5, 1]).unwrap();
        let mut loss = tape.add(task, nodes.aux).unwrap();
        if let Some(reg) = nodes.regularizer {
            loss = tape.add(loss, reg).unwrap();
        }
        let report = finite_diff_report(&mut tape, loss, 1e-5, 1e-7).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "{kind} seed {seed}: {report:?}"
        );
        assert!(report.checked > 0);
        points += 1;
    }
}

#[test]
fn linear() {
    check(RouterKind::Linear);
}

#[test]
fn attention() {
    check(RouterKind::Attention);
}

#[test]
fn mlp() {
    check(RouterKind::Mlp);
}

#[test]
fn hybrid() {
    check(RouterKind::Hybrid);
}

#[test]
fn mlp_hadamard() {
    check(RouterKind::MlpHadamard);
}

#[test]
fn self_supervised() {
    check(RouterKind::SelfSupervised);
}
