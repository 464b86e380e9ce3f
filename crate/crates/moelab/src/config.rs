//! Experiment settings and the flat `key = value` config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use moelab_core::moe::{AuxForm, ExpertKind, DEFAULT_ALPHA_AUX};
use moelab_core::optim::OptimizerKind;
use moelab_core::routers::{HashAlgorithm, HybridMix, KeyInit, RouterConfig, RouterKind};
use moelab_core::Activation;

use crate::error::{Error, Result};

/// Where characterization inputs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    /// Gaussian states drawn from the experiment seed.
    Random,
    /// A `MOEB` embedding file.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub router: RouterKind,
    pub hidden: usize,
    pub experts: usize,
    pub top_k: usize,
    /// `None` means `4 * hidden`.
    pub d_ff: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    pub grad_accum: usize,
    pub steps: usize,
    pub log_every: usize,
    pub seq_len: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            router: RouterKind::Linear,
            hidden: 64,
            experts: 8,
            top_k: 2,
            d_ff: None,
            lr: 2e-4,
            batch: 2,
            grad_accum: 4,
            steps: 50,
            log_every: 10,
            seq_len: 256,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn ffn_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub router: RouterKind,
    /// Hidden size, expert count, `top_k` and seed live here.
    pub router_cfg: RouterConfig,
    pub batch: usize,
    pub seq: usize,
    pub runs: usize,
    pub reps: usize,
    pub warmup: usize,
    /// Time router + expert forwards as well as the router alone.
    pub latency_with_experts: bool,
    pub expert_kind: ExpertKind,
    /// `None` means `4 * hidden`.
    pub d_ff: Option<usize>,
    pub expert_activation: Activation,
    pub expert_std: f64,
    pub alpha_aux: f64,
    pub aux_form: AuxForm,
    pub input: InputSource,
    /// `MOET` file with a BERT-style FFN cloned into every expert.
    pub experts_file: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            router: RouterKind::Linear,
            router_cfg: RouterConfig::default(),
            batch: 16,
            seq: 128,
            runs: 1024,
            reps: 5,
            warmup: 64,
            latency_with_experts: false,
            expert_kind: ExpertKind::Standard,
            d_ff: None,
            expert_activation: Activation::Gelu,
            expert_std: 0.02,
            alpha_aux: DEFAULT_ALPHA_AUX,
            aux_form: AuxForm::Squared,
            input: InputSource::Random,
            experts_file: None,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("{key}: cannot parse '{value}': {e}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{value}'")),
    }
}

impl ExperimentConfig {
    pub fn hidden(&self) -> usize {
        self.router_cfg.hidden_size
    }

    pub fn ffn_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.hidden())
    }

    /// Every key accepted by [`ExperimentConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "router",
        "hidden",
        "experts",
        "top_k",
        "seed",
        "qk_dim",
        "mlp_hidden",
        "hadamard_hidden",
        "temperature",
        "linear_bias",
        "activation",
        "router_top_k",
        "orth_lambda",
        "hadamard_head_init",
        "hybrid_mix",
        "key_init",
        "init_std",
        "ss_hidden",
        "ss_dim",
        "ss_temperature",
        "hash_algorithm",
        "hash_scale",
        "batch",
        "seq",
        "runs",
        "reps",
        "warmup",
        "latency_with_experts",
        "expert_kind",
        "d_ff",
        "expert_activation",
        "expert_std",
        "alpha_aux",
        "aux_form",
        "embeddings",
        "experts_file",
        "train_router",
        "train_hidden",
        "train_experts",
        "train_top_k",
        "train_d_ff",
        "lr",
        "train_batch",
        "grad_accum",
        "steps",
        "log_every",
        "seq_len",
        "optimizer",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let rc = &mut self.router_cfg;
        let t = &mut self.train;
        match key {
            "router" => self.router = parse(key, value)?,
            "hidden" => rc.hidden_size = parse(key, value)?,
            "experts" => rc.num_experts = parse(key, value)?,
            "top_k" => rc.top_k = parse(key, value)?,
            "seed" => {
                rc.seed = parse(key, value)?;
                t.seed = rc.seed;
            }
            "qk_dim" => rc.qk_dim = parse(key, value)?,
            "mlp_hidden" => rc.mlp_hidden = parse(key, value)?,
            "hadamard_hidden" => rc.hadamard_hidden = Some(parse(key, value)?),
            "temperature" => rc.temperature = parse(key, value)?,
            "linear_bias" => rc.linear_bias = parse_bool(key, value)?,
            "activation" => rc.activation = parse(key, value)?,
            "router_top_k" => rc.router_top_k = parse(key, value)?,
            "orth_lambda" => rc.orth_lambda = parse(key, value)?,
            "hadamard_head_init" => rc.hadamard_head_init = parse_bool(key, value)?,
            "hybrid_mix" => {
                rc.hybrid_mix = match value {
                    "learned" => HybridMix::Learned,
                    w => HybridMix::Fixed(parse(key, w)?),
                }
            }
            "key_init" => {
                rc.key_init = match value {
                    "normal" => KeyInit::Normal,
                    "uniform" => KeyInit::Uniform,
                    _ => return Err(format!("{key}: expected normal or uniform, got '{value}'")),
                }
            }
            "init_std" => rc.init_std = parse(key, value)?,
            "ss_hidden" => rc.ss_hidden = parse(key, value)?,
            "ss_dim" => rc.ss_dim = parse(key, value)?,
            "ss_temperature" => rc.ss_temperature = parse(key, value)?,
            "hash_algorithm" => {
                rc.hash_algorithm = match value {
                    "sign-bits" => HashAlgorithm::SignBits,
                    "quantized" => HashAlgorithm::Quantized,
                    _ => {
                        return Err(format!(
                            "{key}: expected sign-bits or quantized, got '{value}'"
                        ))
                    }
                }
            }
            "hash_scale" => rc.hash_scale = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "seq" => self.seq = parse(key, value)?,
            "runs" => self.runs = parse(key, value)?,
            "reps" => self.reps = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "latency_with_experts" => self.latency_with_experts = parse_bool(key, value)?,
            "expert_kind" => self.expert_kind = parse(key, value)?,
            "d_ff" => self.d_ff = Some(parse(key, value)?),
            "expert_activation" => self.expert_activation = parse(key, value)?,
            "expert_std" => self.expert_std = parse(key, value)?,
            "alpha_aux" => self.alpha_aux = parse(key, value)?,
            "aux_form" => self.aux_form = parse(key, value)?,
            "embeddings" => self.input = InputSource::File(PathBuf::from(value)),
            "experts_file" => self.experts_file = Some(PathBuf::from(value)),
            "train_router" => t.router = parse(key, value)?,
            "train_hidden" => t.hidden = parse(key, value)?,
            "train_experts" => t.experts = parse(key, value)?,
            "train_top_k" => t.top_k = parse(key, value)?,
            "train_d_ff" => t.d_ff = Some(parse(key, value)?),
            "lr" => t.lr = parse(key, value)?,
            "train_batch" => t.batch = parse(key, value)?,
            "grad_accum" => t.grad_accum = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "seq_len" => t.seq_len = parse(key, value)?,
            "optimizer" => t.optimizer = parse(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Applies a config file body on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|message| Error::Config {
                    line: i + 1,
                    message,
                })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.router_cfg.validate()?;
        if self.batch == 0 || self.seq == 0 {
            return Err(Error::Invalid("batch and seq must be at least 1".into()));
        }
        if self.runs == 0 || self.reps == 0 {
            return Err(Error::Invalid("runs and reps must be at least 1".into()));
        }
        let t = &self.train;
        if t.batch == 0 || t.grad_accum == 0 || t.log_every == 0 || t.seq_len < 2 {
            return Err(Error::Invalid(
                "train batch, grad_accum and log_every must be >= 1 and seq_len >= 2".into(),
            ));
        }
        if t.top_k == 0 || t.top_k > t.experts {
            return Err(Error::Invalid(format!(
                "train top_k must be in 1..={}",
                t.experts
            )));
        }
        Ok(())
    }
}
