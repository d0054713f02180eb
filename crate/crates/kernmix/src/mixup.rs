//! Convex input mixing with Beta-sampled coefficients.
//!
//! A batch is paired with a random permutation of itself and blended in input
//! space: `mixed = lambda * x + (1 - lambda) * x[perm]`. One lambda is drawn
//! per batch from Beta(alpha, alpha); the labels of both parents ride along
//! so that losses can interpolate between them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this value are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Draws the mixing coefficient from Beta(alpha, alpha). `alpha == 0`
/// degenerates to no mixing (lambda = 1) and consumes no randomness.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mixing concentration must be a finite non-negative number, got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(1.0);
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("bad Beta parameter {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// A batch blended with a permutation of itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    /// Blended inputs, same shape as the originals.
    pub inputs: Tensor,
    /// Labels of the original items.
    pub labels_a: Vec<usize>,
    /// Labels of the blended-in partners.
    pub labels_b: Vec<usize>,
    pub lambda: f64,
    pub permutation: Vec<usize>,
}

fn collisions(labels: &[usize], perm: &[usize]) -> usize {
    perm.iter()
        .enumerate()
        .filter(|(i, &p)| labels[*i] == labels[p])
        .count()
}

/// Blends a batch with a uniformly drawn permutation of itself.
///
/// With `avoid_same_label` the permutation is redrawn up to ten times and the
/// draw with the fewest same-label pairings wins; collisions that survive all
/// redraws are kept, since some batches admit no collision-free pairing.
pub fn mix_batch<R: Rng + ?Sized>(
    inputs: &Tensor,
    labels: &[usize],
    lambda: f64,
    rng: &mut R,
    avoid_same_label: bool,
) -> Result<MixedBatch> {
    let b = *inputs.shape().first().ok_or_else(|| {
        Error::InvalidArgument("mix_batch needs a batched input".to_string())
    })?;
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".to_string()));
    }
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "batch of {b} inputs with {} labels",
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixing coefficient must lie in [0, 1], got {lambda}"
        )));
    }

    let draw = |rng: &mut R| {
        let mut p: Vec<usize> = (0..b).collect();
        p.shuffle(rng);
        p
    };
    let mut perm = draw(rng);
    if avoid_same_label {
        let mut best_collisions = collisions(labels, &perm);
        for _ in 0..9 {
            if best_collisions == 0 {
                break;
            }
            let candidate = draw(rng);
            let c = collisions(labels, &candidate);
            if c < best_collisions {
                best_collisions = c;
                perm = candidate;
            }
        }
    }

    let stride = inputs.numel() / b;
    let mixed = if lambda == 1.0 {
        inputs.clone()
    } else if lambda == 0.0 {
        inputs.gather_rows(&perm)?
    } else {
        let mut data = vec![0.0; inputs.numel()];
        let x = inputs.data();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..stride {
                data[i * stride + j] = lambda * x[i * stride + j] + (1.0 - lambda) * x[p * stride + j];
            }
        }
        Tensor::new(inputs.shape().to_vec(), data)?
    };

    let labels_b = perm.iter().map(|&p| labels[p]).collect();
    Ok(MixedBatch {
        inputs: mixed,
        labels_a: labels.to_vec(),
        labels_b,
        lambda,
        permutation: perm,
    })
}

/// Recovers the original batch from a blended one by solving the linear
/// recurrence along each permutation cycle. Defined for any lambda in [0, 1]
/// except 1/2, where opposite cycle elements cancel and the blend loses
/// information.
pub fn unmix_batch(batch: &MixedBatch) -> Result<Tensor> {
    let lambda = batch.lambda;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixing coefficient must lie in [0, 1], got {lambda}"
        )));
    }
    let b = batch.permutation.len();
    let mixed = &batch.inputs;
    if lambda == 1.0 {
        return Ok(mixed.clone());
    }
    if lambda == 0.0 {
        let mut inverse = vec![0usize; b];
        for (i, &p) in batch.permutation.iter().enumerate() {
            inverse[p] = i;
        }
        return mixed.gather_rows(&inverse);
    }
    if lambda == 0.5 {
        return Err(Error::InvalidArgument(
            "a half-and-half blend is not invertible".to_string(),
        ));
    }

    let stride = mixed.numel() / b;
    let t = -(1.0 - lambda) / lambda;
    let mut data = vec![0.0; mixed.numel()];
    let m = mixed.data();
    for start in 0..b {
        // x_i = (1/lambda) * sum_{j<L} t^j m_{p^j(i)} / (1 - t^L) over the
        // cycle of length L through i.
        let mut cycle_len = 1usize;
        let mut at = batch.permutation[start];
        while at != start {
            at = batch.permutation[at];
            cycle_len += 1;
        }
        let scale = 1.0 / (lambda * (1.0 - t.powi(cycle_len as i32)));
        let mut coeff = scale;
        let mut at = start;
        for _ in 0..cycle_len {
            for j in 0..stride {
                data[start * stride + j] += coeff * m[at * stride + j];
            }
            coeff *= t;
            at = batch.permutation[at];
        }
    }
    Tensor::new(mixed.shape().to_vec(), data)
}

/// Cross-entropy of a probability vector node against one target class, with
/// the probability clamped to at least `PROB_FLOOR` before the log.
pub fn cross_entropy_node(tape: &mut Tape, probs: NodeId, target: usize) -> Result<NodeId> {
    let n = tape.data(probs).len();
    if target >= n {
        return Err(Error::IndexOutOfRange {
            what: "target class",
            index: target,
            size: n,
        });
    }
    let p = tape.index(probs, target)?;
    let clamped = tape.clamp_min(p, PROB_FLOOR)?;
    let lp = tape.ln(clamped)?;
    tape.neg(lp)
}

/// Plain-value cross-entropy against one target class.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::vector(probs.to_vec()), false);
    let ce = cross_entropy_node(&mut tape, p, target)?;
    tape.scalar_value(ce)
}

/// Interpolated cross-entropy of one probability vector against both parent
/// labels: `lambda * ce(y_a) + (1 - lambda) * ce(y_b)`.
pub fn mixup_loss_node(
    tape: &mut Tape,
    probs: NodeId,
    label_a: usize,
    label_b: usize,
    lambda: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixing coefficient must lie in [0, 1], got {lambda}"
        )));
    }
    let ce_a = cross_entropy_node(tape, probs, label_a)?;
    let ce_b = cross_entropy_node(tape, probs, label_b)?;
    let ta = tape.mul_scalar(ce_a, lambda)?;
    let tb = tape.mul_scalar(ce_b, 1.0 - lambda)?;
    tape.add(ta, tb)
}

/// Interpolated cross-entropy over a batch of logit rows, computed through a
/// stable log-softmax: `lambda * mean(nll_a) + (1 - lambda) * mean(nll_b)`.
pub fn mixup_ce_on_logits_node(
    tape: &mut Tape,
    logits: NodeId,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixing coefficient must lie in [0, 1], got {lambda}"
        )));
    }
    if labels_a.len() != labels_b.len() {
        return Err(Error::InvalidArgument(format!(
            "parent label lists differ in length: {} vs {}",
            labels_a.len(),
            labels_b.len()
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let picked_a = tape.pick_per_row(logp, labels_a)?;
    let picked_b = tape.pick_per_row(logp, labels_b)?;
    let mean_a = tape.mean(picked_a)?;
    let mean_b = tape.mean(picked_b)?;
    let ta = tape.mul_scalar(mean_a, -lambda)?;
    let tb = tape.mul_scalar(mean_b, -(1.0 - lambda))?;
    tape.add(ta, tb)
}
