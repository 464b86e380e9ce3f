//! Reverse-mode gradients over a fixed op set.
//!
//! A [`Tape`] records every intermediate value of a forward computation.
//! [`Tape::backward`] walks the nodes in reverse recording order and
//! accumulates vector-Jacobian products. Values on the tape are matrices
//! (`[rows, cols]`) except reductions, which are `[1]`.
//!
//! Leaves may borrow their tensors, so inference through a tape costs no
//! parameter copies. [`finite_diff_check`] re-evaluates the same tape with
//! perturbed leaves to verify analytic gradients.

mod check;
mod tape;

pub use check::{finite_diff_check, finite_diff_report, FdReport};
pub use tape::{straight_through_topk, Gradients, MaskGrad, NodeId, Tape};

/// Eight-accumulator dot product. Fixed association order, so it is
/// deterministic, but not bit-equal to a naive left fold.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

use alloc::vec::Vec;

use crate::numcore::Tensor;

/// A module with named learnable tensors.
pub trait Parameterized {
    /// `(name, tensor)` in a fixed order.
    fn parameters(&self) -> Vec<(&'static str, &Tensor)>;

    /// Same order as [`Parameterized::parameters`].
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Number of learnable scalars.
    fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Pushes every parameter onto `tape` as a borrowed leaf.
    fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<NodeId> {
        self.parameters()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.parameter(t)
                } else {
                    tape.constant_ref(t)
                }
            })
            .collect()
    }
}
