//! Characterization campaigns over random or file-loaded hidden states.

use moelab_core::metrics::{
    latency_benchmark, mean_topk_probability, output_stats, routing_entropy, utilization,
    BenchConfig, CharacterizationRow, LatencyReport,
};
use moelab_core::moe::{MoeLayer, MoeOutput};
use moelab_core::routers::{Router, RouterKind};
use moelab_core::Tensor;

use crate::clock::InstantClock;
use crate::config::{ExperimentConfig, InputSource};
use crate::container::{bert_ffn, load_tensors};
use crate::embeddings::{generate_random_states, load_embeddings};
use crate::error::{Error, Result};
use crate::report::CharacterizationReport;

/// Hidden states `[B, S, H]` for the configured source.
pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Tensor> {
    match &cfg.input {
        InputSource::Random => {
            generate_random_states(cfg.batch, cfg.seq, cfg.hidden(), cfg.router_cfg.seed)
        }
        InputSource::File(path) => {
            let t = load_embeddings(path)?;
            if t.cols() != cfg.hidden() {
                return Err(Error::Invalid(format!(
                    "{}: hidden size {} does not match configured {}",
                    path.display(),
                    t.cols(),
                    cfg.hidden()
                )));
            }
            Ok(t)
        }
    }
}

/// MoE layer for `kind` with the configured experts.
pub fn build_layer(cfg: &ExperimentConfig, kind: RouterKind) -> Result<MoeLayer> {
    let mut layer = MoeLayer::random(
        kind,
        &cfg.router_cfg,
        cfg.expert_kind,
        cfg.ffn_width(),
        cfg.expert_activation,
        cfg.expert_std,
    )?;
    layer.alpha_aux = cfg.alpha_aux;
    layer.aux_form = cfg.aux_form;
    if let Some(path) = &cfg.experts_file {
        let [wi, bi, wo, bo] = bert_ffn(&load_tensors(path)?)?;
        layer.load_bert_style_experts(&wi, &bi, &wo, &bo)?;
    }
    Ok(layer)
}

/// Routing metrics of one full forward, without timing.
pub fn routing_row(layer: &MoeLayer, inputs: &Tensor) -> Result<(CharacterizationRow, MoeOutput)> {
    let out = layer.forward(inputs)?;
    let row = CharacterizationRow {
        router: layer.router.kind().name().to_string(),
        param_count: moelab_core::grad::Parameterized::param_count(&layer.router),
        latency_router_us: 0.0,
        latency_total_us: 0.0,
        entropy_nats: routing_entropy(&out.decision),
        mean_topk_prob: mean_topk_probability(&out.decision),
        output_std: output_stats(&out.output)?.std,
        aux_loss: out.aux,
        utilization: utilization(&out.decision),
    };
    Ok((row, out))
}

pub fn bench_config(cfg: &ExperimentConfig) -> BenchConfig {
    BenchConfig {
        runs: cfg.runs,
        reps: cfg.reps,
        warmup: cfg.warmup,
        with_experts: cfg.latency_with_experts,
    }
}

pub fn measure_latency(
    cfg: &ExperimentConfig,
    layer: &MoeLayer,
    inputs: &Tensor,
) -> Result<LatencyReport> {
    Ok(latency_benchmark(
        layer,
        inputs,
        bench_config(cfg),
        &InstantClock::new(),
    )?)
}

/// One row per router in `kinds`, all on the same inputs.
pub fn characterize(
    cfg: &ExperimentConfig,
    kinds: &[RouterKind],
) -> Result<CharacterizationReport> {
    cfg.validate()?;
    let inputs = load_inputs(cfg)?;
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let layer = build_layer(cfg, kind)?;
        let (mut row, _) = routing_row(&layer, &inputs)?;
        let lat = measure_latency(cfg, &layer, &inputs)?;
        row.latency_router_us = lat.router.median_us;
        row.latency_total_us = lat.total.median_us;
        rows.push(row);
    }
    Ok(CharacterizationReport { rows })
}
