//! Characterization metrics and the latency protocol.
//!
//! Utilization is the dispatch fraction of each expert divided by `k`, so it
//! is a distribution for any `k`. Entropies are in nats.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::hint::black_box;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::moe::{dispatch_fractions, MoeLayer, RoutingDecision};
use crate::numcore::Tensor;
use crate::routers::Router;

/// Bins of [`output_stats`] histograms.
pub const HISTOGRAM_BINS: usize = 64;
/// Half-width of the histogram range in standard deviations.
pub const HISTOGRAM_SPAN_STD: f64 = 4.0;

/// Share of token-slot assignments per expert. Sums to one.
pub fn utilization(decision: &RoutingDecision) -> Vec<f64> {
    let k = decision.k() as f64;
    dispatch_fractions(
        decision.indices(),
        decision.tokens(),
        decision.num_experts(),
    )
    .into_iter()
    .map(|f| f / k)
    .collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * libm::log(v))
        .sum::<f64>()
}

/// Entropy of the batch utilization. A decision always holds at least one
/// token, so there is no empty case to reject.
pub fn routing_entropy(decision: &RoutingDecision) -> f64 {
    entropy(&utilization(decision)).max(0.0)
}

/// Mean over tokens of the entropy of each full probability row. Zero for
/// one-hot routers whatever their load balance.
pub fn mean_token_entropy(decision: &RoutingDecision) -> f64 {
    let p = decision.probabilities();
    let n = p.rows();
    (0..n).map(|t| entropy(p.row(t)).max(0.0)).sum::<f64>() / n as f64
}

/// Mean over tokens and slots of the raw probability of each selected expert.
pub fn mean_topk_probability(decision: &RoutingDecision) -> f64 {
    let n = decision.tokens();
    let total: f64 = (0..n)
        .flat_map(|t| decision.selected_probabilities(t))
        .sum();
    total / (n * decision.k()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Left edge of the first bin.
    pub lo: f64,
    /// Right edge of the last bin.
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    /// Center of bin `i`.
    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Histogram,
}

/// Mean, population std and a histogram over `mean ± 4 std`. Values outside
/// the range land in the edge bins, so counts always sum to the element
/// count. A constant tensor fills the center bin.
pub fn output_stats(y: &Tensor) -> Result<OutputStats> {
    let data = y.data();
    if data.is_empty() {
        return Err(param_err!("output statistics of an empty tensor"));
    }
    let n = data.len() as f64;
    let (mean, std) = if data.iter().all(|&v| v == data[0]) {
        // exact, where a summed mean could be off by an ulp
        (data[0], 0.0)
    } else {
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, libm::sqrt(var))
    };
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let (lo, hi) = (
        mean - HISTOGRAM_SPAN_STD * std,
        mean + HISTOGRAM_SPAN_STD * std,
    );
    if std > 0.0 {
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        for v in data {
            let b = libm::floor((v - lo) / width);
            let b = if b < 0.0 {
                0
            } else {
                (b as usize).min(HISTOGRAM_BINS - 1)
            };
            counts[b] += 1;
        }
    } else {
        counts[HISTOGRAM_BINS / 2] = data.len() as u64;
    }
    Ok(OutputStats {
        mean,
        std,
        histogram: Histogram { lo, hi, counts },
    })
}

/// One row of a characterization report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationRow {
    pub router: String,
    pub param_count: usize,
    /// Median per-token latency of the router alone.
    pub latency_router_us: f64,
    /// Median per-token latency of routing plus the selected experts.
    pub latency_total_us: f64,
    pub entropy_nats: f64,
    pub mean_topk_prob: f64,
    pub output_std: f64,
    pub aux_loss: f64,
    pub utilization: Vec<f64>,
}

/// Monotonic nanosecond clock.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
}

impl LatencyStats {
    /// Statistics of one block of per-token samples in microseconds.
    pub fn from_samples(samples: &mut [f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let median = if n % 2 == 1 {
            samples[n / 2]
        } else {
            0.5 * (samples[n / 2 - 1] + samples[n / 2])
        };
        // nearest rank
        let rank = libm::ceil(0.99 * n as f64) as usize;
        Self {
            mean_us: samples.iter().sum::<f64>() / n as f64,
            median_us: median,
            p99_us: samples[rank.max(1) - 1],
        }
    }

    fn average(blocks: &[LatencyStats]) -> Self {
        let n = blocks.len() as f64;
        Self {
            mean_us: blocks.iter().map(|b| b.mean_us).sum::<f64>() / n,
            median_us: blocks.iter().map(|b| b.median_us).sum::<f64>() / n,
            p99_us: blocks.iter().map(|b| b.p99_us).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub router: LatencyStats,
    pub total: LatencyStats,
}

/// Protocol settings for [`latency_benchmark`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub runs: usize,
    pub reps: usize,
    pub warmup: usize,
    /// Also time full forwards through the selected experts.
    pub with_experts: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 1024,
            reps: 5,
            warmup: 64,
            with_experts: true,
        }
    }
}

/// Single-token latency of `layer`.
///
/// Runs `warmup` untimed forwards, then `reps` blocks of `runs` timed
/// single-token forwards cycling through the rows of `tokens`. Router-only
/// and full-layer timings are separate loops; the latter is skipped, and
/// reported as zeros, unless `cfg.with_experts`. Per-block statistics are
/// averaged across blocks.
pub fn latency_benchmark<C: Clock>(
    layer: &MoeLayer,
    tokens: &Tensor,
    cfg: BenchConfig,
    clock: &C,
) -> Result<LatencyReport> {
    if cfg.runs == 0 || cfg.reps == 0 {
        return Err(param_err!("runs and reps must be at least 1"));
    }
    crate::routers::check_width(tokens, layer.hidden_size())?;
    let h = layer.hidden_size();
    let pool: Vec<Tensor> = (0..tokens.len() / h)
        .map(|t| Tensor::from_parts(vec![1, h], tokens.data()[t * h..(t + 1) * h].to_vec()))
        .collect();
    for i in 0..cfg.warmup {
        let x = &pool[i % pool.len()];
        black_box(layer.router.probabilities(x)?);
        if cfg.with_experts {
            black_box(layer.forward(x)?);
        }
    }
    let mut router_blocks = Vec::with_capacity(cfg.reps);
    let mut total_blocks = Vec::with_capacity(cfg.reps);
    let mut samples = vec![0.0; cfg.runs];
    for _ in 0..cfg.reps {
        for (i, s) in samples.iter_mut().enumerate() {
            let x = black_box(&pool[i % pool.len()]);
            let t0 = clock.now_ns();
            black_box(layer.router.probabilities(x)?);
            *s = clock.now_ns().saturating_sub(t0) as f64 / 1e3;
        }
        router_blocks.push(LatencyStats::from_samples(&mut samples));
        if !cfg.with_experts {
            continue;
        }
        for (i, s) in samples.iter_mut().enumerate() {
            let x = black_box(&pool[i % pool.len()]);
            let t0 = clock.now_ns();
            black_box(layer.forward(x)?);
            *s = clock.now_ns().saturating_sub(t0) as f64 / 1e3;
        }
        total_blocks.push(LatencyStats::from_samples(&mut samples));
    }
    Ok(LatencyReport {
        router: LatencyStats::average(&router_blocks),
        total: if cfg.with_experts {
            LatencyStats::average(&total_blocks)
        } else {
            LatencyStats::default()
        },
    })
}
