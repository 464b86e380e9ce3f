//! Deterministic numeric kernel: dense tensors, seeded RNG, softmax, top-k,
//! activations and norms. All arithmetic is `f64` and all transcendental
//! functions go through `libm`, so results are bit-identical across targets.

mod kernels;
mod rng;
mod tensor;

pub use kernels::{
    activation, l2_normalize, l2_normalize_slice, softmax, softmax_slice, topk, topk_indices,
    Activation,
};
pub use rng::{rng_normal, Rng};
pub use tensor::Tensor;
