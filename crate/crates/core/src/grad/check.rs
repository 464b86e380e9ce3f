use alloc::vec::Vec;

use super::{NodeId, Tape};
use crate::error::{param_err, Result};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Max of `|analytic - numeric| / (|numeric| + 1e-12)` over checked entries.
    pub max_rel_error: f64,
    /// Entries compared with the relative formula.
    pub checked: usize,
    /// Entries whose gradients were both below `floor` and agreed to `floor`.
    pub negligible: usize,
}

/// Entries sampled per trainable leaf.
const SAMPLES_PER_LEAF: usize = 24;

/// [`finite_diff_report`] with a `1e-7` floor, returning only the error.
pub fn finite_diff_check(tape: &mut Tape<'_>, loss: NodeId, h: f64) -> Result<f64> {
    finite_diff_report(tape, loss, h, 1e-7).map(|r| r.max_rel_error)
}

/// Compares analytic gradients with central differences at step `h`.
///
/// Up to 24 evenly spaced entries per trainable leaf are perturbed. When
/// both the analytic and numeric gradient are below `floor` the entry is
/// counted as negligible if they agree to within `floor`; otherwise their
/// gap divided by `floor` enters the maximum. The tape is restored before
/// returning.
pub fn finite_diff_report(
    tape: &mut Tape<'_>,
    loss: NodeId,
    h: f64,
    floor: f64,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(param_err!("step h must be positive, got {}", h));
    }
    let grads = tape.backward(loss)?;
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        negligible: 0,
    };
    for param in tape.parameters() {
        let len = tape.value(param).len();
        let analytic = grads.wrt(param, tape.value(param));
        let picks: Vec<usize> = if len <= SAMPLES_PER_LEAF {
            (0..len).collect()
        } else {
            (0..SAMPLES_PER_LEAF)
                .map(|j| (j * len + len / 2) / SAMPLES_PER_LEAF)
                .collect()
        };
        for idx in picks {
            let orig = tape.value(param).data()[idx];
            tape.leaf_value_mut(param).data_mut()[idx] = orig + h;
            tape.recompute();
            let plus = tape.scalar(loss);
            tape.leaf_value_mut(param).data_mut()[idx] = orig - h;
            tape.recompute();
            let minus = tape.scalar(loss);
            tape.leaf_value_mut(param).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let gap = (a - numeric).abs();
            let err = if a.abs().max(numeric.abs()) < floor {
                if gap <= floor {
                    report.negligible += 1;
                    continue;
                }
                gap / floor
            } else {
                report.checked += 1;
                gap / (numeric.abs() + 1e-12)
            };
            report.max_rel_error = report.max_rel_error.max(err);
        }
    }
    tape.recompute();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{rng_normal, Activation, Rng, Tensor};

    fn two_layer(rng: &mut Rng) -> (Tensor, Tensor, Tensor, Tensor) {
        let x = rng_normal(rng, &[5, 4], 0.0, 1.0).unwrap();
        let w1 = rng_normal(rng, &[6, 4], 0.0, 0.5).unwrap();
        let w2 = rng_normal(rng, &[3, 6], 0.0, 0.5).unwrap();
        let b1 = rng_normal(rng, &[6], 0.0, 0.1).unwrap();
        (x, w1, w2, b1)
    }

    #[test]
    fn two_layer_mlp_matches_central_differences() {
        let mut rng = Rng::new(5);
        let (x, w1, w2, b1) = two_layer(&mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant_ref(&x);
        let w1n = tape.parameter(&w1);
        let b1n = tape.parameter(&b1);
        let w2n = tape.parameter(&w2);
        let h = tape.linear(xn, w1n).unwrap();
        let h = tape.add_bias(h, b1n).unwrap();
        let h = tape.activation(h, Activation::Gelu);
        let logits = tape.linear(h, w2n).unwrap();
        let loss = tape.cross_entropy(logits, vec![0, 1, 2, 1, 0]).unwrap();
        let err = finite_diff_check(&mut tape, loss, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn linear_loss_is_nearly_exact() {
        let mut rng = Rng::new(8);
        let x = rng_normal(&mut rng, &[3, 4], 0.0, 1.0).unwrap();
        let w = rng_normal(&mut rng, &[2, 4], 0.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let xn = tape.constant_ref(&x);
        let wn = tape.parameter(&w);
        let y = tape.linear(xn, wn).unwrap();
        let loss = tape.sum(y);
        let err = finite_diff_check(&mut tape, loss, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel error {err}");
    }

    #[test]
    fn error_grows_with_step_on_curved_loss() {
        let mut rng = Rng::new(5);
        let (x, w1, w2, b1) = two_layer(&mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant_ref(&x);
        let w1n = tape.parameter(&w1);
        let b1n = tape.parameter(&b1);
        let w2n = tape.parameter(&w2);
        let h = tape.linear(xn, w1n).unwrap();
        let h = tape.add_bias(h, b1n).unwrap();
        let h = tape.activation(h, Activation::Silu);
        let logits = tape.linear(h, w2n).unwrap();
        let loss = tape.cross_entropy(logits, vec![0, 1, 2, 1, 0]).unwrap();
        let small = finite_diff_check(&mut tape, loss, 1e-5).unwrap();
        let large = finite_diff_check(&mut tape, loss, 1e-1).unwrap();
        assert!(large > small, "h=0.1 error {large} vs h=1e-5 error {small}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut tape = Tape::new();
        let w = tape.parameter_owned(Tensor::scalar(1.0));
        let l = tape.sum(w);
        assert!(finite_diff_check(&mut tape, l, 0.0).is_err());
    }
}
