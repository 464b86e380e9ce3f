use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::numcore::Activation;

/// How the hybrid router weighs its linear and attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HybridMix {
    /// Two learnable logits, softmaxed into convex weights.
    Learned,
    /// Constant weight on the linear path; `1 - w` on the attention path.
    Fixed(f64),
}

/// Distribution of the attention router's expert keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyInit {
    /// `N(0, init_std)`.
    Normal,
    /// `U(-sqrt(3) init_std, sqrt(3) init_std)`, same variance as `Normal`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HashAlgorithm {
    /// Sign bits of the first 64 coordinates. Scale-invariant.
    SignBits,
    /// `round(x * scale)` of the first 64 coordinates.
    Quantized,
}

/// Hyperparameters shared by all router variants.
///
/// Each router reads only the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub hidden_size: usize,
    pub num_experts: usize,
    /// Experts per token in the enclosing MoE layer.
    pub top_k: usize,
    /// Query/key width of the attention family.
    pub qk_dim: usize,
    /// Hidden width of the MLP router.
    pub mlp_hidden: usize,
    /// Hidden width of the MLP-Hadamard router; `None` means `hidden_size`,
    /// in which case no input projection is used.
    pub hadamard_hidden: Option<usize>,
    /// Attention temperature.
    pub temperature: f64,
    pub linear_bias: bool,
    pub activation: Activation,
    /// Nonzero probabilities kept per row by the MLP-Hadamard router.
    pub router_top_k: usize,
    /// Weight of the MLP-Hadamard head orthogonality penalty.
    pub orth_lambda: f64,
    /// Initialize the MLP-Hadamard head from Hadamard-matrix rows.
    pub hadamard_head_init: bool,
    pub hybrid_mix: HybridMix,
    pub key_init: KeyInit,
    /// Std of Gaussian weight initialization.
    pub init_std: f64,
    /// Self-supervised extractor hidden width.
    pub ss_hidden: usize,
    /// Self-supervised feature width.
    pub ss_dim: usize,
    /// Contrastive temperature.
    pub ss_temperature: f64,
    pub hash_algorithm: HashAlgorithm,
    pub hash_scale: f64,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            hidden_size: 768,
            num_experts: 8,
            top_k: 2,
            qk_dim: 64,
            mlp_hidden: 128,
            hadamard_hidden: None,
            temperature: 1.0,
            linear_bias: false,
            activation: Activation::Gelu,
            router_top_k: 2,
            orth_lambda: 1e-3,
            hadamard_head_init: true,
            hybrid_mix: HybridMix::Learned,
            key_init: KeyInit::Normal,
            init_std: 0.02,
            ss_hidden: 128,
            ss_dim: 64,
            ss_temperature: 0.5,
            hash_algorithm: HashAlgorithm::SignBits,
            hash_scale: 1.0,
            seed: 0,
        }
    }
}

impl RouterConfig {
    pub fn with_dims(hidden_size: usize, num_experts: usize, top_k: usize) -> Self {
        Self {
            hidden_size,
            num_experts,
            top_k,
            ..Self::default()
        }
    }

    pub fn hadamard_width(&self) -> usize {
        self.hadamard_hidden.unwrap_or(self.hidden_size)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_size", self.hidden_size),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("qk_dim", self.qk_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("hadamard_hidden", self.hadamard_width()),
            ("router_top_k", self.router_top_k),
            ("ss_hidden", self.ss_hidden),
            ("ss_dim", self.ss_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(param_err!("{} must be >= 1", name));
            }
        }
        if self.top_k > self.num_experts {
            return Err(param_err!(
                "top_k {} exceeds num_experts {}",
                self.top_k,
                self.num_experts
            ));
        }
        for (name, v) in [
            ("temperature", self.temperature),
            ("ss_temperature", self.ss_temperature),
            ("hash_scale", self.hash_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(param_err!("{} must be positive, got {}", name, v));
            }
        }
        if !(self.orth_lambda >= 0.0) || !(self.init_std >= 0.0) {
            return Err(param_err!("orth_lambda and init_std must be >= 0"));
        }
        if let HybridMix::Fixed(w) = self.hybrid_mix {
            if !(0.0..=1.0).contains(&w) {
                return Err(param_err!(
                    "fixed hybrid weight must be in [0, 1], got {}",
                    w
                ));
            }
        }
        Ok(())
    }
}
