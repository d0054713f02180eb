//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{NodeId, Tape};

/// Compares the analytic gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate, and returns the worst
/// relative error `|analytic - numeric| / max(eps, |numeric|)`.
///
/// The denominator is floored at the probe step: double-precision central
/// differences carry ~1e-11 cancellation noise, so gradients smaller than
/// `eps` cannot be resolved at a fine relative tolerance and are compared at
/// the probe-step scale instead. A genuinely wrong analytic value still
/// surfaces as `|analytic| / eps`.
///
/// `build` must construct the same (deterministic) computation every time it
/// is called; it receives a fresh tape and the node holding `x`.
pub fn finite_difference_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite_difference_check needs a positive step, got {eps}"
        )));
    }

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, xid)?;
    let base = tape.scalar_value(loss).map_err(|_| Error::NotScalar {
        op: "finite_difference_check",
        shape: tape.shape(loss).to_vec(),
    })?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference_check",
        });
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(xid)
        .expect("leaf was created with requires_grad")
        .to_vec();

    let eval_at = |coord: usize, value: f64| -> Result<f64> {
        let mut probe = x.clone();
        probe.data_mut()[coord] = value;
        let mut tape = Tape::new();
        let id = tape.leaf(probe, false);
        let loss = build(&mut tape, id)?;
        let v = tape.scalar_value(loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_check",
            });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let plus = eval_at(i, x.data()[i] + eps)?;
        let minus = eval_at(i, x.data()[i] - eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(eps);
        worst = worst.max(err);
    }
    Ok(worst)
}
