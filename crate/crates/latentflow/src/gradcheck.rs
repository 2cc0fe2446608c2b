//! Central finite-difference verification of analytic gradients.
//!
//! Runs a forward closure twice per probed element with the leaf perturbed
//! by ±h and compares the slope against the recorded backward pass. Meant
//! to be used with the `f64` tensor engine ([`TensorBase<f64>`]); in `f32`
//! the difference quotient itself carries too much rounding error at the
//! default step. The check only consumes the forward closure and the
//! analytic gradient map, so it stays independent of how any individual op
//! implements its backward.

use crate::error::{Error, Result};
use crate::tensor::{RngState, TensorBase};

/// Outcome of a finite-difference sweep.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Worst relative error seen across all probed elements.
    pub max_rel_error: f64,
    /// Number of probed elements.
    pub probes: usize,
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Elements probed per leaf tensor.
    pub samples_per_tensor: usize,
    /// Below this magnitude the comparison falls back to an absolute check.
    pub small: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            rel_tol: 1e-4,
            samples_per_tensor: 5,
            small: 1e-6,
        }
    }
}

/// Verify the analytic gradients of a scalar-valued forward pass.
///
/// `forward` must rebuild the graph from the given leaves on every call
/// (the leaves are perturbed in place between calls). Any randomness inside
/// must be re-seeded per call so repeated evaluations agree.
pub fn check_gradients(
    forward: impl Fn() -> Result<TensorBase<f64>>,
    leaves: &[TensorBase<f64>],
    opts: GradCheckOptions,
    rng: &mut RngState,
) -> Result<GradCheckReport> {
    let loss = forward()?;
    if loss.numel() != 1 {
        return Err(Error::Contract(
            "gradient check requires a scalar loss".into(),
        ));
    }
    let grads = loss.backward()?;

    let mut max_rel: f64 = 0.0;
    let mut probes = 0;
    for leaf in leaves {
        let Some(analytic) = grads.get_raw(leaf) else {
            return Err(Error::Contract(format!(
                "leaf `{}` received no gradient",
                leaf.name().unwrap_or("<unnamed>")
            )));
        };
        let n = leaf.numel();
        let count = opts.samples_per_tensor.min(n);
        for _ in 0..count {
            let idx = rng.below(n);
            let original = leaf.data()[idx];

            leaf.update_in_place(|d| d[idx] = original + opts.step);
            let plus = forward()?.item()?;
            leaf.update_in_place(|d| d[idx] = original - opts.step);
            let minus = forward()?.item()?;
            leaf.update_in_place(|d| d[idx] = original);

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom > opts.small {
                (a - numeric).abs() / denom
            } else if (a - numeric).abs() < opts.rel_tol * opts.small {
                0.0
            } else {
                (a - numeric).abs() / opts.small
            };
            if rel > opts.rel_tol {
                return Err(Error::Contract(format!(
                    "gradient mismatch at `{}`[{idx}]: analytic {a:.6e}, numeric {numeric:.6e}, rel {rel:.3e}",
                    leaf.name().unwrap_or("<unnamed>")
                )));
            }
            max_rel = max_rel.max(rel);
            probes += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorBase;

    #[test]
    fn accepts_correct_gradient() {
        let mut rng = RngState::new(5, 0);
        let x = TensorBase::<f64>::param("x", rng.normal_vec(6), &[2, 3]).unwrap();
        let w = TensorBase::<f64>::param("w", rng.normal_vec(6), &[3, 2]).unwrap();
        let forward = || {
            let y = x.matmul(&w)?.tanh();
            Ok(y.mul(&y)?.mean_all())
        };
        let mut probe_rng = RngState::new(9, 0);
        let report = check_gradients(
            forward,
            &[x.clone(), w.clone()],
            GradCheckOptions::default(),
            &mut probe_rng,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4);
        assert!(report.probes > 0);
    }

    #[test]
    fn rejects_wrong_gradient() {
        // A forward that ignores half of x while the "gradient" under test
        // would be nonzero there cannot be constructed directly, so instead
        // check a genuinely broken setup: a leaf that never enters the loss.
        let x = TensorBase::<f64>::param("x", vec![1.0], &[1]).unwrap();
        let y = TensorBase::<f64>::param("y", vec![2.0], &[1]).unwrap();
        let forward = || Ok(x.mul(&x)?.sum_all());
        let mut rng = RngState::new(1, 0);
        let err = check_gradients(
            forward,
            &[y.clone()],
            GradCheckOptions::default(),
            &mut rng,
        );
        assert!(err.is_err());
    }
}
