//! Mixture-of-experts routing kernels.
//!
//! `moelab-core` is `no_std` (with `alloc`) and carries everything that is
//! pure arithmetic:
//!
//! - [`numcore`]: dense `f64` tensors, a seeded generator, softmax, top-k,
//!   activations and norms.
//! - [`grad`]: a small reverse-mode tape over the op set routers and MoE
//!   layers need, plus a central-difference verifier.
//! - [`routers`]: linear, attention, MLP, hybrid, MLP-Hadamard, hash and
//!   self-supervised routers behind the [`routers::Router`] trait.
//! - [`moe`]: top-k dispatch, expert FFNs, the MoE layer and the
//!   load-balancing loss.
//! - [`metrics`]: utilization entropy, mean top-k probability, output
//!   statistics and a clock-agnostic latency harness.
//! - [`optim`]: Adam and SGD over flat parameter lists.
//!
//! File formats, the experiment runner and the CLI live in the `moelab`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod grad;
pub mod metrics;
pub mod moe;
pub mod numcore;
pub mod optim;
pub mod routers;

pub use error::{Error, Result};
pub use numcore::{Activation, Rng, Tensor};
