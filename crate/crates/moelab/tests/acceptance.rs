//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 3 and 8 are known to fail on this implementation for reasons
//! given in the README. They still print FAIL; the process exits non-zero
//! only if some other criterion fails, or if a known failure starts passing
//! so the list can be updated.

use std::time::{Duration, Instant};

use moelab::config::TrainConfig;
use moelab::embeddings::{decode, encode, generate_random_states};
use moelab::export::{heatmap_pgm, parse_pgm};
use moelab::report::CharacterizationReport;
use moelab::train::train_toy;
use moelab_core::grad::{finite_diff_report, MaskGrad, Parameterized, Tape};
use moelab_core::metrics::{
    latency_benchmark, mean_token_entropy, mean_topk_probability, routing_entropy, BenchConfig,
    CharacterizationRow, Clock,
};
use moelab_core::moe::{aux_from_stats, aux_loss, select_topk, AuxForm, ExpertKind, MoeLayer};
use moelab_core::numcore::{rng_normal, Rng};
use moelab_core::routers::{AnyRouter, Router, RouterConfig, RouterKind};
use moelab_core::{Activation, Tensor};

const KNOWN_FAILURES: &[usize] = &[3, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(seed: u64, n: usize, h: usize) -> Tensor {
    rng_normal(&mut Rng::new(seed), &[n, h], 0.0, 1.0).unwrap()
}

fn router(kind: RouterKind, cfg: &RouterConfig) -> AnyRouter {
    AnyRouter::build(kind, cfg).unwrap()
}

fn c1_parameter_accounting() -> Outcome {
    let cfg = RouterConfig::with_dims(768, 8, 2);
    let (h, e, dh) = (768, 8, cfg.mlp_hidden);
    let expected = [
        (RouterKind::Linear, 6_144),
        (RouterKind::Attention, 49_664),
        (RouterKind::Hybrid, 55_810),
        (RouterKind::Hash, 0),
        (RouterKind::Mlp, h * dh + dh + dh * e + e),
        (RouterKind::MlpHadamard, h * h + h + e * h + e),
    ];
    let mut bad = Vec::new();
    let mut seen = Vec::new();
    for (kind, want) in expected {
        let got = router(kind, &cfg).param_count();
        seen.push(format!("{kind}={got}"));
        if got != want {
            bad.push(format!("{kind}: {got} != {want}"));
        }
    }
    if bad.is_empty() {
        outcome(true, seen.join(" "))
    } else {
        outcome(false, bad.join("; "))
    }
}

fn c2_entropy_analytics() -> Outcome {
    let cfg = RouterConfig::with_dims(768, 8, 2);
    let x = gaussian(20, 2048, 768);
    let p = router(RouterKind::Hash, &cfg).probabilities(&x).unwrap();
    let d = select_topk(&p, 2).unwrap();
    let hash_token_entropy = mean_token_entropy(&d);
    let hash_topk = mean_topk_probability(&d);
    let seeds = 5;
    let mut attention = 0.0;
    for seed in 0..seeds {
        let cfg = RouterConfig {
            seed,
            ..cfg.clone()
        };
        let x = gaussian(200 + seed, 2048, 768);
        let p = router(RouterKind::Attention, &cfg)
            .probabilities(&x)
            .unwrap();
        attention += routing_entropy(&select_topk(&p, 2).unwrap()) / seeds as f64;
    }
    let ln8 = 8f64.ln();
    let pass = hash_token_entropy == 0.0 && hash_topk == 0.5 && (attention - ln8).abs() < 0.05;
    outcome(
        pass,
        format!(
            "hash per-token entropy {hash_token_entropy} (batch utilization {:.4}), hash mean top-k {hash_topk}, \
             attention utilization entropy {attention:.4} vs ln 8 {ln8:.4}",
            routing_entropy(&d)
        ),
    )
}

fn c3_hadamard_sparsity() -> Outcome {
    let mut max_nonzero = 0;
    let mut ordered = 0;
    let mut pairs = Vec::new();
    let seeds = 5u64;
    for seed in 0..seeds {
        let cfg = RouterConfig {
            seed,
            ..RouterConfig::with_dims(768, 8, 2)
        };
        let x = gaussian(300 + seed, 2048, 768);
        let ph = router(RouterKind::MlpHadamard, &cfg)
            .probabilities(&x)
            .unwrap();
        let pm = router(RouterKind::Mlp, &cfg).probabilities(&x).unwrap();
        for t in 0..ph.rows() {
            max_nonzero = max_nonzero.max(ph.row(t).iter().filter(|&&v| v != 0.0).count());
        }
        let eh = routing_entropy(&select_topk(&ph, 2).unwrap());
        let em = routing_entropy(&select_topk(&pm, 2).unwrap());
        if eh < em {
            ordered += 1;
        }
        pairs.push(format!("{eh:.4}/{em:.4}"));
    }
    outcome(
        max_nonzero <= 2 && ordered == seeds,
        format!(
            "max nonzero per row {max_nonzero}; hadamard < mlp entropy on {ordered}/{seeds} seeds (hadamard/mlp: {})",
            pairs.join(", ")
        ),
    )
}

/// Every expert on every token, masked afterwards.
fn dense_oracle(layer: &MoeLayer, x: &Tensor) -> Vec<f64> {
    let h = layer.hidden_size();
    let n = x.rows();
    let d = select_topk(&layer.router.probabilities(x).unwrap(), layer.k).unwrap();
    let mut y = vec![0.0; n * h];
    for t in 0..n {
        let xt = Tensor::new(&[h], x.row(t).to_vec()).unwrap();
        for (e, expert) in layer.experts.iter().enumerate() {
            let out = expert.forward(&xt).unwrap();
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

fn c4_dispatch_oracle() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let kind = RouterKind::ALL[i % RouterKind::ALL.len()];
        let e = 2 + rng.below(7);
        let k = 1 + rng.below(e);
        let n = 1 + rng.below(64);
        let h = 3 + rng.below(6);
        let cfg = RouterConfig {
            seed: i as u64,
            init_std: 0.3,
            qk_dim: 4,
            mlp_hidden: 6,
            ss_hidden: 6,
            ss_dim: 4,
            router_top_k: k,
            ..RouterConfig::with_dims(h, e, k)
        };
        let layer = MoeLayer::random(
            kind,
            &cfg,
            ExpertKind::Standard,
            2 * h,
            Activation::Gelu,
            0.3,
        )
        .unwrap();
        let x = gaussian(400 + i as u64, n, h);
        let y = layer.forward(&x).unwrap().output;
        for (a, b) in y.data().iter().zip(dense_oracle(&layer, &x)) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= 1e-12,
        format!("50 instances, max abs diff {worst:.3e}"),
    )
}

fn decision_from_rows(rows: &[[f64; 2]], k: usize) -> (Tensor, moelab_core::moe::RoutingDecision) {
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let p = Tensor::new(&[rows.len(), 2], data).unwrap();
    let d = select_topk(&p, k).unwrap();
    (p, d)
}

fn c5_aux_loss() -> Outcome {
    let alpha = 0.005;
    let (p, d) = decision_from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], 1);
    let balanced = aux_loss(&p, &d, alpha, AuxForm::Squared).unwrap();
    let (p, d) = decision_from_rows(&[[0.8, 0.2], [0.7, 0.3], [0.6, 0.4], [0.9, 0.1]], 1);
    let concentrated = aux_loss(&p, &d, alpha, AuxForm::Squared).unwrap();
    let uniform = Tensor::filled(&[2048, 8], 0.125);
    let closed = aux_loss(
        &uniform,
        &select_topk(&uniform, 2).unwrap(),
        alpha,
        AuxForm::Squared,
    )
    .unwrap();

    // f = k p and g = q with p and q sorted alike: Chebyshev's sum inequality
    // bounds both forms below by their uniform value.
    let (e, k) = (8usize, 2.0);
    let base_f = vec![k / e as f64; e];
    let base_g = vec![1.0 / e as f64; e];
    let mut rng = Rng::new(5);
    let mut violations = 0;
    for _ in 0..100 {
        let draw = |rng: &mut Rng| {
            let mut v: Vec<f64> = (0..e).map(|_| 1.0 + 0.5 * rng.normal().abs()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v.sort_by(f64::total_cmp);
            v
        };
        let (mut p, mut q) = (draw(&mut rng), draw(&mut rng));
        let mut order: Vec<usize> = (0..e).collect();
        rng.shuffle(&mut order);
        p = order.iter().map(|&i| p[i]).collect();
        q = order.iter().map(|&i| q[i]).collect();
        let f: Vec<f64> = p.iter().map(|v| k * v).collect();
        for form in [AuxForm::Squared, AuxForm::Product] {
            if aux_from_stats(&f, &q, alpha, form)
                < aux_from_stats(&base_f, &base_g, alpha, form) - 1e-18
            {
                violations += 1;
            }
        }
    }
    let pass = balanced == 0.5 * alpha
        && concentrated == 1.125 * alpha
        && closed == 0.00125
        && violations == 0;
    outcome(
        pass,
        format!(
            "balanced {balanced:e} (0.5a = {:e}), concentrated {concentrated:e} (1.125a = {:e}), uniform {closed}, \
             {violations} of 200 perturbation checks below uniform",
            0.5 * alpha,
            1.125 * alpha
        ),
    )
}

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

fn c6_gradients() -> Outcome {
    let kinds = [
        RouterKind::Linear,
        RouterKind::Attention,
        RouterKind::Mlp,
        RouterKind::Hybrid,
        RouterKind::MlpHadamard,
        RouterKind::SelfSupervised,
    ];
    let mut worst: f64 = 0.0;
    let mut per_kind = Vec::new();
    for kind in kinds {
        let (mut points, mut seed, mut kind_worst) = (0, 0u64, 0.0f64);
        while points < 10 {
            seed += 1;
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
                MoeLayer::random(kind, &cfg, ExpertKind::Standard, 8, Activation::Gelu, 0.4)
                    .unwrap();
            layer.mask_grad = MaskGrad::Exact;
            layer.alpha_aux = 0.1;
            if let AnyRouter::MlpHadamard(r) = &mut layer.router {
                r.mask_grad = MaskGrad::Exact;
            }
            let x = gaussian(600 + seed, 4, 6);
            let probs = layer.router.probabilities(&x).unwrap();
            let k = match &layer.router {
                AnyRouter::MlpHadamard(r) => r.router_top_k.min(layer.k),
                _ => layer.k,
            };
            if selection_margin(&probs, k) < 1e-4 {
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
            kind_worst = kind_worst.max(report.max_rel_error);
            points += 1;
        }
        worst = worst.max(kind_worst);
        per_kind.push(format!("{kind} {kind_worst:.1e}"));
    }
    outcome(
        worst < 1e-4,
        format!("max relative error per router: {}", per_kind.join(", ")),
    )
}

fn c7_training() -> Outcome {
    let corpus = include_bytes!("data/corpus.txt");
    let ln256 = 256f64.ln();
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [RouterKind::Linear, RouterKind::Attention] {
        let cfg = TrainConfig {
            router: kind,
            ..TrainConfig::default()
        };
        let report = train_toy(&cfg, corpus).unwrap();
        let losses: Vec<f64> = report.log.iter().map(|e| e.loss).collect();
        let steps: Vec<usize> = report.log.iter().map(|e| e.step).collect();
        let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
        let init_ok = (report.initial_loss - ln256).abs() < 0.5;
        pass &= decreasing && init_ok && steps == [10, 20, 30, 40, 50];
        let shown: Vec<String> = losses.iter().map(|l| format!("{l:.4}")).collect();
        parts.push(format!(
            "{kind}: initial {:.4}, logged [{}]",
            report.initial_loss,
            shown.join(", ")
        ));
    }
    outcome(pass, parts.join("; "))
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

fn c8_latency() -> Outcome {
    let cfg = RouterConfig::with_dims(768, 8, 2);
    let x = gaussian(800, 2048, 768);
    let clock = WallClock(Instant::now());
    let bench = BenchConfig {
        with_experts: false,
        ..BenchConfig::default()
    };
    let mut medians = Vec::new();
    for kind in [RouterKind::Linear, RouterKind::Mlp, RouterKind::Hybrid] {
        // d_ff is irrelevant to router-only timing; keep construction cheap
        let layer =
            MoeLayer::random(kind, &cfg, ExpertKind::Standard, 4, Activation::Gelu, 0.02).unwrap();
        medians.push(
            latency_benchmark(&layer, &x, bench, &clock)
                .unwrap()
                .router
                .median_us,
        );
    }
    let (lin, mlp, hyb) = (medians[0], medians[1], medians[2]);
    outcome(
        lin <= mlp && mlp <= hyb,
        format!("router-only medians: linear {lin:.2} us, mlp {mlp:.2} us, hybrid {hyb:.2} us (required linear <= mlp <= hybrid)"),
    )
}

fn c9_formats() -> Outcome {
    let t = generate_random_states(2, 5, 7, 9).unwrap();
    let bytes = encode(&t).unwrap();
    let loaded = decode(&bytes, std::path::Path::new("<memory>")).unwrap();
    let narrowed = t.map(|v| v as f32 as f64);
    let embed_ok = loaded == narrowed && encode(&loaded).unwrap() == bytes;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.bin");
    moelab::embeddings::save_embeddings(&path, &t).unwrap();
    let file_ok = std::fs::read(&path).unwrap() == bytes
        && moelab::embeddings::load_embeddings(&path).unwrap() == narrowed;

    let report = CharacterizationReport {
        rows: vec![
            CharacterizationRow {
                router: "linear".into(),
                param_count: 6144,
                latency_router_us: 3.25,
                latency_total_us: 0.0,
                entropy_nats: 2.0779490694364084,
                mean_topk_prob: 0.21462761600895092,
                output_std: 0.1 + 0.2,
                aux_loss: 0.00125,
                utilization: vec![0.1, 0.2, 0.3, 0.4],
            },
            CharacterizationRow {
                router: "hash".into(),
                param_count: 0,
                latency_router_us: 1e-7,
                latency_total_us: 12345.678,
                entropy_nats: 0.0,
                mean_topk_prob: 0.5,
                output_std: 1.0 / 3.0,
                aux_loss: 0.0,
                utilization: vec![0.25; 4],
            },
        ],
    };
    let csv_ok = CharacterizationReport::from_csv(&report.to_csv()).unwrap() == report;

    let one_hot = Tensor::matrix(
        8,
        8,
        (0..64).map(|i| f64::from(u8::from(i % 9 == 0))).collect(),
    )
    .unwrap();
    let (w, h, px) = parse_pgm(&heatmap_pgm(&one_hot)).unwrap();
    let one_hot_ok = (w, h) == (8, 8)
        && px.chunks(8).all(|r| {
            r.iter().filter(|&&v| v == 255).count() == 1 && r.iter().all(|&v| v == 0 || v == 255)
        });
    let uniform = Tensor::filled(&[16, 8], 0.125);
    let (_, _, px) = parse_pgm(&heatmap_pgm(&uniform)).unwrap();
    let uniform_ok = px.iter().all(|&v| f64::from(v) == (255.0f64 / 8.0).round());

    outcome(
        embed_ok && file_ok && csv_ok && one_hot_ok && uniform_ok,
        format!(
            "embedding bytes {embed_ok}, embedding file {file_ok}, report CSV {csv_ok}, PGM one-hot {one_hot_ok}, PGM uniform {uniform_ok}"
        ),
    )
}

type Criterion = (usize, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (
            1,
            "parameter accounting",
            Duration::from_secs(1),
            c1_parameter_accounting,
        ),
        (
            2,
            "entropy analytics",
            Duration::from_secs(10),
            c2_entropy_analytics,
        ),
        (
            3,
            "MLP-Hadamard sparsity",
            Duration::from_secs(10),
            c3_hadamard_sparsity,
        ),
        (
            4,
            "top-k dispatch oracle",
            Duration::from_secs(5),
            c4_dispatch_oracle,
        ),
        (5, "aux loss", Duration::from_secs(5), c5_aux_loss),
        (
            6,
            "gradient correctness",
            Duration::from_secs(60),
            c6_gradients,
        ),
        (
            7,
            "training trajectory",
            Duration::from_secs(120),
            c7_training,
        ),
        (8, "latency ordering", Duration::from_secs(120), c8_latency),
        (9, "format round-trips", Duration::from_secs(5), c9_formats),
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took < budget;
        let pass = out.pass && in_time;
        passed += usize::from(pass);
        println!(
            "criterion {id} {}: {name}: {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
        if !in_time {
            println!("criterion {id}: exceeded its runtime budget");
        }
        if pass == KNOWN_FAILURES.contains(&id) {
            unexpected.push(id);
        }
    }
    println!("acceptance: {passed}/9 criteria pass; documented failures: {KNOWN_FAILURES:?}");
    if !unexpected.is_empty() {
        println!(
            "acceptance: outcome differs from the documented status for criteria {unexpected:?}"
        );
        std::process::exit(1);
    }
}
