use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{param_err, shape_err, Error, Result};

/// `sqrt(2 / pi)` for the tanh form of GELU.
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044715;

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    /// `x * sigmoid(x)`.
    Silu,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Relu, Activation::Gelu, Activation::Silu];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + libm::tanh(u))
            }
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// First derivative. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                let t = libm::tanh(u);
                let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "silu" => Ok(Activation::Silu),
            other => Err(param_err!(
                "unknown activation '{}', expected one of relu, gelu, silu",
                String::from(other)
            )),
        }
    }
}

/// Applies `kind` elementwise.
pub fn activation(v: &Tensor, kind: Activation) -> Tensor {
    v.map(|x| kind.apply(x))
}

/// In-place temperature softmax with max subtraction.
pub fn softmax_slice(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp((*v - max) / temperature);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a rank-1 tensor at temperature `temperature`.
pub fn softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(param_err!(
            "temperature must be positive, got {}",
            temperature
        ));
    }
    if logits.rank() != 1 {
        return Err(shape_err!(
            "softmax expects rank 1, got {:?}",
            logits.shape()
        ));
    }
    if logits.is_empty() {
        return Err(shape_err!("softmax of an empty vector"));
    }
    let mut out = logits.data().to_vec();
    softmax_slice(&mut out, temperature);
    Ok(Tensor::vector(out))
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
///
/// Caller guarantees `1 <= k <= values.len()`.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    // Insertion into a k-long sorted buffer: O(n k), fine for expert counts.
    for (i, &v) in values.iter().enumerate() {
        let pos = chosen.iter().position(|&j| v > values[j]);
        match pos {
            Some(p) => {
                if chosen.len() == k {
                    chosen.pop();
                }
                chosen.insert(p, i);
            }
            None if chosen.len() < k => chosen.push(i),
            None => {}
        }
    }
    chosen
}

/// Top-k selection over a rank-1 tensor.
pub fn topk(values: &Tensor, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if values.rank() != 1 {
        return Err(shape_err!("topk expects rank 1, got {:?}", values.shape()));
    }
    if k == 0 || k > values.len() {
        return Err(param_err!("k must be in 1..={}, got {}", values.len(), k));
    }
    let idx = topk_indices(values.data(), k);
    let vals = idx.iter().map(|&i| values.data()[i]).collect();
    Ok((idx, vals))
}

/// `v / max(||v||, epsilon)` in place. Returns the norm before scaling.
pub fn l2_normalize_slice(v: &mut [f64], epsilon: f64) -> f64 {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let denom = if norm > epsilon { norm } else { epsilon };
    for x in v.iter_mut() {
        *x /= denom;
    }
    norm
}

pub fn l2_normalize(v: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(param_err!("epsilon must be positive, got {}", epsilon));
    }
    let mut out = v.clone();
    l2_normalize_slice(out.data_mut(), epsilon);
    Ok(out)
}
