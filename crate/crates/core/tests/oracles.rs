//! Independent straight-line reimplementations checked against the library.

use moelab_core::metrics::{output_stats, utilization};
use moelab_core::moe::{select_topk, ExpertFfn, ExpertKind, MoeLayer};
use moelab_core::numcore::{rng_normal, Rng};
use moelab_core::routers::*;
use moelab_core::{Activation, Tensor};

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum())
        .collect()
}

fn plus(a: &[f64], b: &Tensor) -> Vec<f64> {
    a.iter().zip(b.data()).map(|(x, y)| x + y).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn assert_rows_close(p: &Tensor, expect: &[Vec<f64>], tol: f64) {
    let e = expect[0].len();
    for (t, row) in expect.iter().enumerate() {
        for (j, want) in row.iter().enumerate() {
            let got = p.data()[t * e + j];
            assert!(
                (got - want).abs() < tol,
                "token {t} expert {j}: {got} vs {want}"
            );
        }
    }
}

fn tokens(seed: u64, n: usize, h: usize) -> Tensor {
    rng_normal(&mut Rng::new(seed), &[1, n, h], 0.0, 1.0).unwrap()
}

fn token(x: &Tensor, t: usize) -> &[f64] {
    let h = x.shape()[x.rank() - 1];
    &x.data()[t * h..(t + 1) * h]
}

#[test]
fn linear_matches_straight_line() {
    let cfg = RouterConfig {
        seed: 7,
        linear_bias: true,
        init_std: 0.3,
        ..RouterConfig::with_dims(12, 5, 2)
    };
    let r = LinearRouter::new(&cfg).unwrap();
    let x = tokens(70, 9, 12);
    let bias = r.bias.clone().unwrap();
    let expect: Vec<Vec<f64>> = (0..9)
        .map(|t| softmax(&plus(&matvec(&r.weight, token(&x, t)), &bias)))
        .collect();
    assert_rows_close(&r.probabilities(&x).unwrap(), &expect, 1e-12);
}

#[test]
fn mlp_matches_two_line_oracle() {
    let cfg = RouterConfig {
        seed: 3,
        mlp_hidden: 10,
        init_std: 0.4,
        ..RouterConfig::with_dims(12, 6, 2)
    };
    let r = MlpRouter::new(&cfg).unwrap();
    let x = tokens(30, 7, 12);
    let expect: Vec<Vec<f64>> = (0..7)
        .map(|t| {
            let h: Vec<f64> = plus(&matvec(&r.w1, token(&x, t)), &r.b1)
                .into_iter()
                .map(gelu)
                .collect();
            softmax(&plus(&matvec(&r.w2, &h), &r.b2))
        })
        .collect();
    assert_rows_close(&r.probabilities(&x).unwrap(), &expect, 1e-12);
}

#[test]
fn attention_matches_straight_line() {
    let cfg = RouterConfig {
        seed: 5,
        qk_dim: 6,
        temperature: 0.7,
        init_std: 0.3,
        ..RouterConfig::with_dims(10, 4, 2)
    };
    let r = AttentionRouter::new(&cfg).unwrap();
    let x = tokens(50, 6, 10);
    let expect: Vec<Vec<f64>> = (0..6)
        .map(|t| {
            let q = matvec(&r.query, token(&x, t));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let q: Vec<f64> = q.iter().map(|v| v / n).collect();
            let s: Vec<f64> = matvec(&r.keys, &q)
                .iter()
                .map(|v| v / (6f64.sqrt() * 0.7))
                .collect();
            softmax(&s)
        })
        .collect();
    assert_rows_close(&r.probabilities(&x).unwrap(), &expect, 1e-12);
}

#[test]
fn mlp_hadamard_matches_straight_line() {
    let cfg = RouterConfig {
        seed: 8,
        init_std: 0.4,
        router_top_k: 3,
        hadamard_head_init: false,
        ..RouterConfig::with_dims(8, 6, 2)
    };
    let r = MlpHadamardRouter::new(&cfg).unwrap();
    let x = tokens(80, 5, 8);
    let expect: Vec<Vec<f64>> = (0..5)
        .map(|t| {
            let xt = token(&x, t);
            let h: Vec<f64> = plus(&matvec(&r.w1, xt), &r.b1)
                .into_iter()
                .zip(xt)
                .map(|(v, xi)| gelu(v) * xi)
                .collect();
            let p = softmax(&plus(&matvec(&r.w2, &h), &r.b2));
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let kept: f64 = order[..3].iter().map(|&i| p[i]).sum();
            let mut out = vec![0.0; p.len()];
            for &i in &order[..3] {
                out[i] = p[i] / kept;
            }
            out
        })
        .collect();
    assert_rows_close(&r.probabilities(&x).unwrap(), &expect, 1e-12);
}

#[test]
fn self_supervised_is_extractor_then_linear_head() {
    let cfg = RouterConfig {
        seed: 4,
        ss_hidden: 9,
        ss_dim: 5,
        ..RouterConfig::with_dims(7, 4, 2)
    };
    let r = SelfSupervisedRouter::new(&cfg).unwrap();
    // the extractor is an MLP router without its softmax, so reuse the pieces
    let x = tokens(40, 6, 7);
    let features = r.features(&x).unwrap();
    let expect: Vec<Vec<f64>> = (0..6)
        .map(|t| {
            let h: Vec<f64> = plus(&matvec(&r.wa, token(&x, t)), &r.ba)
                .into_iter()
                .map(gelu)
                .collect();
            let z = plus(&matvec(&r.wb, &h), &r.bb);
            for (a, b) in z.iter().zip(token(&features, t)) {
                assert!((a - b).abs() < 1e-12);
            }
            softmax(&plus(&matvec(&r.w_route, &z), &r.b_route))
        })
        .collect();
    assert_rows_close(&r.probabilities(&x).unwrap(), &expect, 1e-12);
}

#[test]
fn self_supervised_pretraining_separates_two_clusters() {
    let h = 32;
    let n = 64;
    let mut rng = Rng::new(100);
    let ca = rng_normal(&mut rng, &[h], 0.0, 1.0).unwrap();
    let cb = rng_normal(&mut rng, &[h], 0.0, 1.0).unwrap();
    // centers ~ 3 sqrt(2 h) apart, per-token noise 0.1 per coordinate
    let mut data = Vec::with_capacity(2 * n * h);
    for i in 0..2 * n {
        let c = if i < n { &ca } else { &cb };
        data.extend(c.data().iter().map(|v| 3.0 * v + 0.1 * rng.normal()));
    }
    let x = Tensor::new(&[2 * n, h], data).unwrap();
    for seed in 0..4 {
        let cfg = RouterConfig {
            seed,
            ..RouterConfig::with_dims(h, 8, 2)
        };
        let mut r = SelfSupervisedRouter::new(&cfg).unwrap();
        let opts = PretrainOptions {
            seed,
            ..PretrainOptions::default()
        };
        r.pretrain(&x, &opts).unwrap();
        let p = r.probabilities(&x).unwrap();
        let argmax: Vec<usize> = (0..2 * n)
            .map(|t| {
                let row = p.row(t);
                (0..8).fold(0, |best, e| if row[e] > row[best] { e } else { best })
            })
            .collect();
        let differ = (0..n)
            .flat_map(|i| (n..2 * n).map(move |j| (i, j)))
            .filter(|&(i, j)| argmax[i] != argmax[j])
            .count();
        let frac = differ as f64 / (n * n) as f64;
        assert!(frac >= 0.9, "seed {seed}: {frac}");
    }
}

#[test]
fn hash_spreads_gaussian_tokens_evenly() {
    let r = HashRouter::new(&RouterConfig::with_dims(64, 8, 2)).unwrap();
    let mut rng = Rng::new(12);
    let mut counts = [0usize; 8];
    let mut tok = vec![0.0; 64];
    for _ in 0..100_000 {
        tok.iter_mut().for_each(|v| *v = rng.normal());
        counts[r.expert_for(&tok)] += 1;
    }
    for c in counts {
        let share = c as f64 / 1e5;
        assert!((0.115..=0.135).contains(&share), "{counts:?}");
    }
}

fn layer(kind: RouterKind, e: usize, k: usize, h: usize, seed: u64) -> MoeLayer {
    let cfg = RouterConfig {
        seed,
        init_std: 0.3,
        qk_dim: 4,
        mlp_hidden: 6,
        ss_hidden: 6,
        ss_dim: 4,
        router_top_k: k,
        top_k: k,
        ..RouterConfig::with_dims(h, e, k)
    };
    MoeLayer::random(
        kind,
        &cfg,
        ExpertKind::Standard,
        2 * h,
        Activation::Gelu,
        0.3,
    )
    .unwrap()
}

/// Evaluates every expert on every token and masks afterwards.
fn dense_oracle(layer: &MoeLayer, x: &Tensor) -> Vec<f64> {
    let h = layer.hidden_size();
    let n = x.len() / h;
    let p = layer.router.probabilities(x).unwrap();
    let d = select_topk(&p.to_matrix(), layer.k).unwrap();
    let mut y = vec![0.0; n * h];
    for t in 0..n {
        let xt = Tensor::new(&[h], token(x, t).to_vec()).unwrap();
        for e in 0..layer.num_experts() {
            let out = layer.experts[e].forward(&xt).unwrap();
            let w = d
                .token_indices(t)
                .iter()
                .position(|&i| i == e)
                .map_or(0.0, |slot| d.token_weights(t)[slot]);
            for j in 0..h {
                y[t * h + j] += w * out.data()[j];
            }
        }
    }
    y
}

#[test]
fn sparse_dispatch_equals_dense_masked_sum() {
    let l = layer(RouterKind::Linear, 4, 2, 6, 11);
    let x = tokens(110, 10, 6);
    let y = l.forward(&x).unwrap().output;
    for (a, b) in y.data().iter().zip(dense_oracle(&l, &x)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn equal_identity_experts_return_input() {
    // relu(I x) = x on non-negative x, so each expert is the identity there
    let h = 5;
    let eye = Tensor::eye(h);
    let ident = ExpertFfn::standard(
        eye.clone(),
        Tensor::zeros(&[h]),
        eye,
        Tensor::zeros(&[h]),
        Activation::Relu,
    )
    .unwrap();
    let x = tokens(3, 8, h).map(f64::abs);
    for kind in RouterKind::ALL {
        let mut l = layer(kind, 4, 2, h, 1);
        l.experts = vec![ident.clone(); 4];
        let y = l.forward(&x).unwrap().output;
        assert!(y.max_abs_diff(&x) < 1e-12, "{kind}");
    }
}

#[test]
fn hash_with_k1_is_single_expert_dispatch() {
    let l = layer(RouterKind::Hash, 4, 1, 6, 2);
    let x = tokens(20, 12, 6);
    let y = l.forward(&x).unwrap().output;
    let AnyRouter::Hash(r) = &l.router else {
        unreachable!()
    };
    for t in 0..12 {
        let xt = Tensor::new(&[6], token(&x, t).to_vec()).unwrap();
        let expect = l.experts[r.expert_for(token(&x, t))].forward(&xt).unwrap();
        assert_eq!(token(&y, t), expect.data());
    }
}

#[test]
fn bert_style_clones_reduce_to_one_ffn() {
    let h = 6;
    let mut l = layer(RouterKind::Attention, 4, 2, h, 9);
    let mut rng = Rng::new(90);
    let w_int = rng_normal(&mut rng, &[12, h], 0.0, 0.3).unwrap();
    let b_int = rng_normal(&mut rng, &[12], 0.0, 0.3).unwrap();
    let w_out = rng_normal(&mut rng, &[h, 12], 0.0, 0.3).unwrap();
    let b_out = rng_normal(&mut rng, &[h], 0.0, 0.3).unwrap();
    l.load_bert_style_experts(&w_int, &b_int, &w_out, &b_out)
        .unwrap();
    let ffn = ExpertFfn::standard(w_int, b_int, w_out, b_out, Activation::Gelu).unwrap();
    let x = tokens(91, 7, h);
    let y = l.forward(&x).unwrap().output;
    let plain = ffn.forward(&x).unwrap();
    assert!(y.max_abs_diff(&plain) < 1e-12);
    assert!(l
        .load_bert_style_experts(
            &Tensor::zeros(&[12, 5]),
            &Tensor::zeros(&[12]),
            &Tensor::zeros(&[5, 12]),
            &Tensor::zeros(&[5])
        )
        .is_err());
}

#[test]
fn random_init_output_mean_near_zero() {
    // Each output coordinate carries its own init-dependent offset, so the
    // independent units are coordinates, not elements.
    let h = 32;
    let n = 512;
    let x = tokens(60, n, h);
    for kind in [
        RouterKind::Linear,
        RouterKind::Attention,
        RouterKind::Mlp,
        RouterKind::Hybrid,
    ] {
        let l = layer(kind, 8, 2, h, 6);
        let y = l.forward(&x).unwrap().output;
        let mean = output_stats(&y).unwrap().mean;
        let coord: Vec<f64> = (0..h)
            .map(|j| (0..n).map(|t| y.data()[t * h + j]).sum::<f64>() / n as f64)
            .collect();
        let var = coord.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (h - 1) as f64;
        let se = (var / h as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "{kind}: mean {mean} se {se}");
    }
}

#[test]
fn utilization_sums_to_one_for_every_router() {
    let x = tokens(61, 40, 6);
    for kind in RouterKind::ALL {
        let l = layer(kind, 5, 2, 6, 3);
        let out = l.forward(&x).unwrap();
        let u = utilization(&out.decision);
        assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{kind}");
    }
}
