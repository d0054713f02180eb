//! Training objectives: mixup-regularized variants of the kernel classifier
//! loss, and classical metric-learning baselines.
//!
//! The mixup family combines the Gaussian neighbourhood classifier with
//! blended inputs in three ways:
//!
//! - `mixup_sum`: kernel loss on clean embeddings plus interpolated
//!   cross-entropy on the logit head of the blended inputs;
//! - `mixup_embed`: interpolated kernel loss evaluated directly on the
//!   embeddings of the blended inputs;
//! - `mixup_both`: `alpha * mixup_embed` plus the clean kernel loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernel::{
    class_probabilities_with_neighbours_node, kernel_batch_node, neighbourhood, CenterBank,
    KernelConfig,
};
use crate::mixup::{mixup_ce_on_logits_node, mixup_loss_node};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Gaussian neighbourhood classifier loss on clean embeddings.
    Kernel,
    /// Interpolated cross-entropy on the logit head of blended inputs.
    Mixup,
    /// Kernel loss on clean embeddings + logit-head mixup term.
    MixupSum,
    /// Interpolated kernel loss on embeddings of blended inputs.
    MixupEmbed,
    /// alpha * mixup_embed + clean kernel loss.
    MixupBoth,
    Contrastive,
    Triplet,
    Nca,
}

impl LossVariant {
    pub const ALL: [LossVariant; 8] = [
        LossVariant::Kernel,
        LossVariant::Mixup,
        LossVariant::MixupSum,
        LossVariant::MixupEmbed,
        LossVariant::MixupBoth,
        LossVariant::Contrastive,
        LossVariant::Triplet,
        LossVariant::Nca,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Kernel => "kernel",
            LossVariant::Mixup => "mixup",
            LossVariant::MixupSum => "mixup_sum",
            LossVariant::MixupEmbed => "mixup_embed",
            LossVariant::MixupBoth => "mixup_both",
            LossVariant::Contrastive => "contrastive",
            LossVariant::Triplet => "triplet",
            LossVariant::Nca => "nca",
        }
    }

    /// Whether training blends inputs for this objective.
    pub fn uses_mixing(&self) -> bool {
        matches!(
            self,
            LossVariant::Mixup | LossVariant::MixupSum | LossVariant::MixupEmbed | LossVariant::MixupBoth
        )
    }

    /// Whether the kernel classifier (bank + weights) takes part in training.
    pub fn trains_kernel(&self) -> bool {
        matches!(
            self,
            LossVariant::Kernel | LossVariant::MixupSum | LossVariant::MixupEmbed | LossVariant::MixupBoth
        )
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant '{s}'")))
    }
}

fn default_alpha() -> f64 {
    1.0
}

/// A loss choice plus its scalar knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub variant: LossVariant,
    /// Weight of the interpolated term inside `mixup_both`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Margin for contrastive / triplet; `None` takes the per-variant default.
    #[serde(default)]
    pub margin: Option<f64>,
}

impl LossSpec {
    pub fn new(variant: LossVariant) -> Self {
        LossSpec {
            variant,
            alpha: default_alpha(),
            margin: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "loss weight alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if let Some(m) = self.margin {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::Config(format!(
                    "margin must be finite and non-negative, got {m}"
                )));
            }
        }
        Ok(())
    }

    /// The margin in effect: 1.0 for contrastive, 0.05 for triplet.
    pub fn margin_for(&self) -> f64 {
        self.margin.unwrap_or(match self.variant {
            LossVariant::Contrastive => 1.0,
            LossVariant::Triplet => 0.05,
            _ => 0.0,
        })
    }
}

/// Keeps squared distances away from exact zero so the square root stays
/// differentiable; coincident pairs then get a zero gradient instead of NaN.
const DIST_FLOOR: f64 = 1e-24;

/// Clean kernel loss plus the interpolated logit-head term on blended inputs.
#[allow(clippy::too_many_arguments)]
pub fn mixup_sum_node(
    tape: &mut Tape,
    clean_embeddings: NodeId,
    labels: &[usize],
    log_weights: NodeId,
    bank: &CenterBank,
    kcfg: &KernelConfig,
    mixed_logits: NodeId,
    labels_b: &[usize],
    lambda: f64,
) -> Result<NodeId> {
    let kernel = kernel_batch_node(tape, clean_embeddings, labels, log_weights, bank, kcfg)?;
    let mixed = mixup_ce_on_logits_node(tape, mixed_logits, labels, labels_b, lambda)?;
    tape.add(kernel, mixed)
}

/// Interpolated kernel loss on embeddings of blended inputs, with one frozen
/// neighbour set per row.
#[allow(clippy::too_many_arguments)]
pub fn mixup_embed_with_neighbours_node(
    tape: &mut Tape,
    mixed_embeddings: NodeId,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: f64,
    log_weights: NodeId,
    bank: &CenterBank,
    sigma: f64,
    neighbours: &[Vec<usize>],
) -> Result<NodeId> {
    let b = *tape
        .shape(mixed_embeddings)
        .first()
        .ok_or_else(|| Error::InvalidArgument("embeddings must be a matrix".to_string()))?;
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".to_string()));
    }
    if labels_a.len() != b || labels_b.len() != b || neighbours.len() != b {
        return Err(Error::InvalidArgument(format!(
            "batch size mismatch: {b} embeddings, {} + {} labels, {} neighbour sets",
            labels_a.len(),
            labels_b.len(),
            neighbours.len()
        )));
    }
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let xi = tape.row(mixed_embeddings, i)?;
        let probs = class_probabilities_with_neighbours_node(
            tape,
            xi,
            log_weights,
            bank,
            sigma,
            &neighbours[i],
        )?;
        terms.push(mixup_loss_node(tape, probs, labels_a[i], labels_b[i], lambda)?);
    }
    let total = tape.sum_many(&terms)?;
    tape.mul_scalar(total, 1.0 / b as f64)
}

/// Interpolated kernel loss on embeddings of blended inputs.
pub fn mixup_embed_node(
    tape: &mut Tape,
    mixed_embeddings: NodeId,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: f64,
    log_weights: NodeId,
    bank: &CenterBank,
    kcfg: &KernelConfig,
) -> Result<NodeId> {
    kcfg.validate()?;
    let b = *tape
        .shape(mixed_embeddings)
        .first()
        .ok_or_else(|| Error::InvalidArgument("embeddings must be a matrix".to_string()))?;
    let k = kcfg.effective_k(bank.len());
    let mut nbs = Vec::with_capacity(b);
    for i in 0..b {
        let start = i * bank.dim();
        let row = &tape.data(mixed_embeddings)[start..start + bank.dim()];
        nbs.push(neighbourhood(row, bank, k)?);
    }
    mixup_embed_with_neighbours_node(
        tape,
        mixed_embeddings,
        labels_a,
        labels_b,
        lambda,
        log_weights,
        bank,
        kcfg.sigma,
        &nbs,
    )
}

/// `alpha * mixup_embed + kernel` on clean embeddings.
#[allow(clippy::too_many_arguments)]
pub fn mixup_both_node(
    tape: &mut Tape,
    clean_embeddings: NodeId,
    labels: &[usize],
    mixed_embeddings: NodeId,
    labels_b: &[usize],
    lambda: f64,
    alpha: f64,
    log_weights: NodeId,
    bank: &CenterBank,
    kcfg: &KernelConfig,
) -> Result<NodeId> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!(
            "loss weight alpha must be finite and non-negative, got {alpha}"
        )));
    }
    let embed = mixup_embed_node(
        tape,
        mixed_embeddings,
        labels,
        labels_b,
        lambda,
        log_weights,
        bank,
        kcfg,
    )?;
    let scaled = tape.mul_scalar(embed, alpha)?;
    let kernel = kernel_batch_node(tape, clean_embeddings, labels, log_weights, bank, kcfg)?;
    tape.add(scaled, kernel)
}

/// Every unordered pair of batch rows with a same-class flag.
fn all_pairs(labels: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let b = labels.len();
    let mut ia = Vec::new();
    let mut ib = Vec::new();
    let mut same = Vec::new();
    for i in 0..b {
        for j in (i + 1)..b {
            ia.push(i);
            ib.push(j);
            same.push(labels[i] == labels[j]);
        }
    }
    (ia, ib, same)
}

/// Mean over all batch pairs of: squared distance for same-class pairs, and
/// squared hinge `max(0, margin - distance)^2` for different-class pairs.
pub fn contrastive_loss_node(
    tape: &mut Tape,
    embeddings: NodeId,
    labels: &[usize],
    margin: f64,
) -> Result<NodeId> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::Config(format!(
            "margin must be finite and non-negative, got {margin}"
        )));
    }
    let b = labels.len();
    if tape.shape(embeddings).first() != Some(&b) {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: tape.shape(embeddings).to_vec(),
            rhs: vec![b],
        });
    }
    if b < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least two items".to_string(),
        ));
    }
    let (ia, ib, same) = all_pairs(labels);
    let ea = tape.gather_rows(embeddings, &ia)?;
    let eb = tape.gather_rows(embeddings, &ib)?;
    let diff = tape.sub(ea, eb)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum_last_axis(sq)?;
    let floored = tape.clamp_min(s, DIST_FLOOR)?;
    let dist = tape.sqrt(floored)?;
    let neg_d = tape.neg(dist)?;
    let gap = tape.add_scalar(neg_d, margin)?;
    let hinge = tape.relu(gap)?;
    let hinge_sq = tape.mul(hinge, hinge)?;

    let mask_same: Vec<f64> = same.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    let mask_diff: Vec<f64> = same.iter().map(|&x| if x { 0.0 } else { 1.0 }).collect();
    let ms = tape.constant(Tensor::vector(mask_same));
    let md = tape.constant(Tensor::vector(mask_diff));
    let pull = tape.mul(s, ms)?;
    let push = tape.mul(hinge_sq, md)?;
    let combined = tape.add(pull, push)?;
    tape.mean(combined)
}

pub fn contrastive_loss(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings.clone(), false);
    let l = contrastive_loss_node(&mut tape, e, labels, margin)?;
    tape.scalar_value(l)
}

/// Mean hinge `max(0, ||a-p||^2 - ||a-n||^2 + margin)` over every valid
/// (anchor, positive, negative) triple in the batch. Batches admitting no
/// triple yield zero and set the degenerate flag.
pub fn triplet_loss_node(
    tape: &mut Tape,
    embeddings: NodeId,
    labels: &[usize],
    margin: f64,
) -> Result<(NodeId, bool)> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::Config(format!(
            "margin must be finite and non-negative, got {margin}"
        )));
    }
    let b = labels.len();
    if tape.shape(embeddings).first() != Some(&b) {
        return Err(Error::ShapeMismatch {
            op: "triplet_loss",
            lhs: tape.shape(embeddings).to_vec(),
            rhs: vec![b],
        });
    }
    let mut ans = Vec::new();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] != labels[a] {
                    ans.push(a);
                    pos.push(p);
                    neg.push(n);
                }
            }
        }
    }
    if ans.is_empty() {
        return Ok((tape.constant_scalar(0.0), true));
    }
    let ea = tape.gather_rows(embeddings, &ans)?;
    let ep = tape.gather_rows(embeddings, &pos)?;
    let en = tape.gather_rows(embeddings, &neg)?;
    let dp = tape.sub(ea, ep)?;
    let dp2 = tape.mul(dp, dp)?;
    let dap = tape.sum_last_axis(dp2)?;
    let dn = tape.sub(ea, en)?;
    let dn2 = tape.mul(dn, dn)?;
    let dan = tape.sum_last_axis(dn2)?;
    let gap = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(shifted)?;
    Ok((tape.mean(hinge)?, false))
}

pub fn triplet_loss(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings.clone(), false);
    let (l, degenerate) = triplet_loss_node(&mut tape, e, labels, margin)?;
    Ok((tape.scalar_value(l)?, degenerate))
}

/// Soft-neighbour loss: per anchor, the negative log of the probability mass
/// its same-class points take under exp(-squared distance) weighting over all
/// other points. Anchors without a same-class partner are skipped; if every
/// anchor is skipped the loss is zero and the degenerate flag is set.
pub fn nca_loss_node(
    tape: &mut Tape,
    embeddings: NodeId,
    labels: &[usize],
) -> Result<(NodeId, bool)> {
    let b = labels.len();
    if tape.shape(embeddings).first() != Some(&b) {
        return Err(Error::ShapeMismatch {
            op: "nca_loss",
            lhs: tape.shape(embeddings).to_vec(),
            rhs: vec![b],
        });
    }
    if b < 2 {
        return Err(Error::InvalidArgument(
            "soft-neighbour loss needs at least two items".to_string(),
        ));
    }
    let dists = tape.pairwise_sq_dists(embeddings)?;
    let scores = tape.neg(dists)?;
    let mut terms = Vec::new();
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if same.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let row = tape.row(scores, i)?;
        let srow = tape.gather(row, &same)?;
        let orow = tape.gather(row, &others)?;
        let lse_same = tape.log_sum_exp(srow)?;
        let lse_all = tape.log_sum_exp(orow)?;
        let log_ratio = tape.sub(lse_same, lse_all)?;
        let ratio = tape.exp(log_ratio)?;
        let clamped = tape.clamp_min(ratio, crate::mixup::PROB_FLOOR)?;
        let lp = tape.ln(clamped)?;
        terms.push(tape.neg(lp)?);
    }
    if terms.is_empty() {
        return Ok((tape.constant_scalar(0.0), true));
    }
    let total = tape.sum_many(&terms)?;
    let count = terms.len();
    Ok((tape.mul_scalar(total, 1.0 / count as f64)?, false))
}

pub fn nca_loss(embeddings: &Tensor, labels: &[usize]) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings.clone(), false);
    let (l, degenerate) = nca_loss_node(&mut tape, e, labels)?;
    Ok((tape.scalar_value(l)?, degenerate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::finite_difference_check;
    use crate::kernel::kernel_loss;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_center_bank() -> CenterBank {
        CenterBank::new(
            Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap(),
            vec![0, 1],
            vec![0.0, 0.0],
            2,
        )
        .unwrap()
    }

    fn cfg(sigma: f64, k: usize) -> KernelConfig {
        KernelConfig {
            sigma,
            k_neighbours: Some(k),
            centers_per_class: 10,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in LossVariant::ALL {
            let parsed: LossVariant = v.name().parse().unwrap();
            assert_eq!(parsed, v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("bogus".parse::<LossVariant>().is_err());
    }

    #[test]
    fn combined_losses_match_the_hand_chain() {
        // Single query at the class-0 center of a two-center bank, sigma 1:
        // kernel loss 0.12693 towards label 0, 2.12693 towards label 1.
        let bank = two_center_bank();
        let kcfg = cfg(1.0, 2);
        let clean = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let labels = [0usize];
        let labels_b = [1usize];

        // sum variant: logits putting 0.4 on the target class add -ln 0.4
        let mut tape = Tape::new();
        let emb = tape.leaf(clean.clone(), false);
        let lw = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let logits = tape.leaf(
            Tensor::matrix(1, 2, vec![0.4f64.ln(), 0.6f64.ln()]).unwrap(),
            false,
        );
        let loss = mixup_sum_node(
            &mut tape, emb, &labels, lw, &bank, &kcfg, logits, &labels_b, 1.0,
        )
        .unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 1.04322).abs() < 1e-4);

        // embed variant: a half blend scores against both parents
        let mut tape = Tape::new();
        let emb = tape.leaf(clean.clone(), false);
        let lw = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let loss = mixup_embed_node(
            &mut tape, emb, &labels, &labels_b, 0.5, lw, &bank, &kcfg,
        )
        .unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 1.12693).abs() < 1e-4);

        // both variant at alpha 1 stacks the clean kernel term on top
        let mut tape = Tape::new();
        let emb = tape.leaf(clean.clone(), false);
        let emb2 = tape.leaf(clean, false);
        let lw = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let loss = mixup_both_node(
            &mut tape, emb, &labels, emb2, &labels_b, 0.5, 1.0, lw, &bank, &kcfg,
        )
        .unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 1.25386).abs() < 1e-4);
    }

    #[test]
    fn zero_alpha_reduces_combined_to_plain_kernel_loss() {
        let bank = two_center_bank();
        let kcfg = cfg(1.0, 2);
        let clean = Tensor::matrix(2, 2, vec![0.1, 0.2, 1.8, -0.1]).unwrap();
        let mixed = Tensor::matrix(2, 2, vec![0.9, 0.1, 1.1, 0.0]).unwrap();
        let labels = [0usize, 1];
        let labels_b = [1usize, 0];

        let mut tape = Tape::new();
        let emb = tape.leaf(clean.clone(), true);
        let memb = tape.leaf(mixed, true);
        let lw = tape.leaf(Tensor::vector(vec![0.0, 0.0]), true);
        let loss = mixup_both_node(
            &mut tape, emb, &labels, memb, &labels_b, 0.7, 0.0, lw, &bank, &kcfg,
        )
        .unwrap();

        let mut plain = Tape::new();
        let emb_p = plain.leaf(clean, true);
        let lw_p = plain.leaf(Tensor::vector(vec![0.0, 0.0]), true);
        let kern = kernel_batch_node(&mut plain, emb_p, &labels, lw_p, &bank, &kcfg).unwrap();

        assert_eq!(
            tape.scalar_value(loss).unwrap(),
            plain.scalar_value(kern).unwrap()
        );
        tape.backward(loss).unwrap();
        plain.backward(kern).unwrap();
        // bit-identical gradients: the scaled-by-zero branch contributes +0.0
        assert_eq!(tape.grad(emb).unwrap(), plain.grad(emb_p).unwrap());
        assert_eq!(tape.grad(lw).unwrap(), plain.grad(lw_p).unwrap());
    }

    #[test]
    fn contrastive_hand_values() {
        let emb = Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        // same class: squared distance
        assert_eq!(contrastive_loss(&emb, &[1, 1], 1.0).unwrap(), 25.0);
        // different class, margin below the distance: no push
        assert_eq!(contrastive_loss(&emb, &[0, 1], 1.0).unwrap(), 0.0);
        // different class, margin 6: hinge (6 - 5)^2
        assert!((contrastive_loss(&emb, &[0, 1], 6.0).unwrap() - 1.0).abs() < 1e-12);
        // single item: no pairs to form
        let single = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(contrastive_loss(&single, &[0], 1.0).is_err());
        assert!(contrastive_loss(&emb, &[0, 1], -1.0).is_err());
    }

    #[test]
    fn triplet_hand_values() {
        // anchor-positive 1 apart, anchor-negative 2 apart: hinge closed
        let emb = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0]).unwrap();
        let (l, degenerate) = triplet_loss(&emb, &[0, 0, 1], 0.05).unwrap();
        assert!(!degenerate);
        // triples: (0,1,2): 1-4+.05 -> 0; (1,0,2): 1-1+.05 -> .05; mean .025
        assert!((l - 0.025).abs() < 1e-12);

        // no valid triple: all items share one class
        let (l, degenerate) = triplet_loss(&emb, &[0, 0, 0], 0.05).unwrap();
        assert!(degenerate);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn soft_neighbour_hand_value() {
        let emb = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = [0usize, 0, 1];
        let (l, degenerate) = nca_loss(&emb, &labels).unwrap();
        assert!(!degenerate);
        // anchor 0: both others at distance^2 1 -> mass 1/2 -> ln 2
        // anchor 1: e^-1 / (e^-1 + e^-2) -> -ln(1/(1+e^-1))
        // anchor 2: no same-class partner, skipped
        let a0 = 2.0f64.ln();
        let a1 = -(1.0 / (1.0 + (-1.0f64).exp())).ln();
        assert!((l - (a0 + a1) / 2.0).abs() < 1e-12);

        // all classes distinct: every anchor is skipped
        let (l, degenerate) = nca_loss(&emb, &[0, 1, 2]).unwrap();
        assert!(degenerate);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn soft_neighbour_survives_distant_clusters() {
        // A lone same-class partner very far away: the mass underflows and
        // the probability floor caps the loss instead of producing infinity.
        let emb = Tensor::matrix(3, 1, vec![0.0, 500.0, 0.1]).unwrap();
        let (l, degenerate) = nca_loss(&emb, &[0, 0, 1]).unwrap();
        assert!(!degenerate);
        assert!(l.is_finite());
        assert!(l > 0.0);
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let b = 6;
        let d = 3;
        let data: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb = Tensor::matrix(b, d, data).unwrap();
        let labels = vec![0usize, 1, 0, 2, 1, 2];

        let err = finite_difference_check(
            |tape, e| contrastive_loss_node(tape, e, &labels, 1.0),
            &emb,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "contrastive gradient error {err}");

        let err = finite_difference_check(
            |tape, e| triplet_loss_node(tape, e, &labels, 0.05).map(|(l, _)| l),
            &emb,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "triplet gradient error {err}");

        let err = finite_difference_check(
            |tape, e| nca_loss_node(tape, e, &labels).map(|(l, _)| l),
            &emb,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "soft-neighbour gradient error {err}");
    }

    #[test]
    fn combined_gradients_match_finite_differences() {
        let bank = CenterBank::new(
            Tensor::matrix(
                4,
                2,
                vec![0.2, 0.1, 1.5, -0.4, -0.8, 0.9, 0.6, 0.7],
            )
            .unwrap(),
            vec![0, 1, 0, 1],
            vec![0.1, -0.2, 0.3, 0.0],
            2,
        )
        .unwrap();
        let sigma = 1.7;
        let nbs = vec![vec![0, 1, 2, 3], vec![0, 1, 2, 3]];
        let mixed = Tensor::matrix(2, 2, vec![0.4, 0.3, 0.9, -0.1]).unwrap();
        let lw = bank.log_weights().to_vec();

        let err = finite_difference_check(
            |tape, e| {
                let w = tape.leaf(Tensor::vector(lw.clone()), false);
                mixup_embed_with_neighbours_node(
                    tape, e, &[0, 1], &[1, 0], 0.35, w, &bank, sigma, &nbs,
                )
            },
            &mixed,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "blended-embedding gradient error {err}");

        let err = finite_difference_check(
            |tape, w| {
                let e = tape.leaf(mixed.clone(), false);
                mixup_embed_with_neighbours_node(
                    tape, e, &[0, 1], &[1, 0], 0.35, w, &bank, sigma, &nbs,
                )
            },
            &Tensor::vector(lw),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "weight gradient error {err}");
    }

    #[test]
    fn mixup_embed_interpolates_between_pure_losses() {
        let bank = two_center_bank();
        let kcfg = cfg(1.0, 2);
        let x = vec![0.3, -0.2];
        let la = kernel_loss(&x, 0, &bank, &kcfg).unwrap();
        let lb = kernel_loss(&x, 1, &bank, &kcfg).unwrap();
        for lambda in [0.0, 0.25, 0.5, 0.8, 1.0] {
            let mut tape = Tape::new();
            let e = tape.leaf(Tensor::matrix(1, 2, x.clone()).unwrap(), false);
            let w = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
            let loss =
                mixup_embed_node(&mut tape, e, &[0], &[1], lambda, w, &bank, &kcfg).unwrap();
            let expect = lambda * la + (1.0 - lambda) * lb;
            assert!((tape.scalar_value(loss).unwrap() - expect).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative_and_finite(seed in 0u64..150) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = rng.gen_range(2usize..8);
            let d = rng.gen_range(1usize..4);
            let data: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let emb = Tensor::matrix(b, d, data).unwrap();
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();

            let c = contrastive_loss(&emb, &labels, 1.0).unwrap();
            prop_assert!(c.is_finite() && c >= 0.0);
            let (t, _) = triplet_loss(&emb, &labels, 0.05).unwrap();
            prop_assert!(t.is_finite() && t >= 0.0);
            let (n, _) = nca_loss(&emb, &labels).unwrap();
            prop_assert!(n.is_finite() && n >= 0.0);
        }
    }
}
