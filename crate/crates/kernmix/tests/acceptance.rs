//! Release-gate checks. Each numbered criterion prints one
//! `[acceptance] criterion N: PASS|FAIL` line so a full run reads as a
//! checklist; the heavier training criteria sit at the end of the file.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kernmix::autodiff::gradcheck::finite_difference_check;
use kernmix::autodiff::Tape;
use kernmix::data::split::SplitMode;
use kernmix::harness::config::{DatasetConfig, TrainConfig};
use kernmix::harness::grid::{relative_gain, round2};
use kernmix::harness::run::train;
use kernmix::kernel::{
    class_probabilities, kernel_batch_node, kernel_loss, neighbourhood, CenterBank, KernelConfig,
};
use kernmix::losses::{
    contrastive_loss_node, mixup_both_node, mixup_embed_node, mixup_sum_node, nca_loss_node,
    triplet_loss_node, LossSpec, LossVariant,
};
use kernmix::mixup::{mix_batch, mixup_ce_on_logits_node, mixup_loss_node};
use kernmix::net::NetSpec;
use kernmix::{Error, Result, Tensor};

const SEED: u64 = 0xacce5;

/// Prints the verdict line and fails the test when anything went wrong.
fn report(criterion: usize, outcome: Result<Vec<String>>) {
    let failures = outcome.unwrap_or_else(|e| vec![format!("aborted: {e}")]);
    let verdict = if failures.is_empty() { "PASS" } else { "FAIL" };
    println!("[acceptance] criterion {criterion}: {verdict}");
    for f in &failures {
        println!("[acceptance]   {f}");
    }
    assert!(failures.is_empty(), "criterion {criterion}: {failures:?}");
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, half_width: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * half_width).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// criterion 1: analytic gradients against central differences
// ---------------------------------------------------------------------------

/// One randomly drawn problem small enough for finite differences.
struct Scenario {
    bank: CenterBank,
    cfg: KernelConfig,
    emb: Tensor,
    mixed: Tensor,
    logits: Tensor,
    labels_a: Vec<usize>,
    labels_b: Vec<usize>,
    lw: Tensor,
    lambda: f64,
    alpha: f64,
}

/// Squared-distance gap between the k-th and (k+1)-th closest center must be
/// wide enough that a 1e-5 perturbation cannot change the membership; with the
/// memberships stable the rebuilt graph matches the differentiated one.
fn k_gap_ok(rows: &Tensor, bank: &CenterBank, k: usize) -> bool {
    if k >= bank.len() {
        return true;
    }
    let d = bank.dim();
    let n = rows.data().len() / d;
    for r in 0..n {
        let q = &rows.data()[r * d..(r + 1) * d];
        let mut dists: Vec<f64> = (0..bank.len())
            .map(|c| sq_dist(q, bank.centers().row(c).unwrap()))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if dists[k] - dists[k - 1] < 1e-3 {
            return false;
        }
    }
    true
}

/// When a queried class has no center inside the neighbourhood, its smoothed
/// probability bottoms out at the epsilon floor: the computed loss is locally
/// flat there while the reverse pass, which freezes the reference maximum,
/// still reports an O(1) slope. Requiring every queried class to be present
/// keeps both sides on the same smooth branch.
fn classes_covered(rows: &Tensor, bank: &CenterBank, k: usize, required: &[Vec<usize>]) -> bool {
    let d = bank.dim();
    for (r, need) in required.iter().enumerate() {
        let q = &rows.data()[r * d..(r + 1) * d];
        let hood = match neighbourhood(q, bank, k) {
            Ok(h) => h,
            Err(_) => return false,
        };
        if !need
            .iter()
            .all(|c| hood.iter().any(|&idx| bank.labels()[idx] == *c))
        {
            return false;
        }
    }
    true
}

/// Every hinge term must sit clear of its kink so both finite-difference
/// evaluations stay on the same smooth piece.
fn hinges_clear(variant: LossVariant, emb: &Tensor, labels: &[usize], margin: f64) -> bool {
    let d = emb.shape()[1];
    let b = labels.len();
    let row = |i: usize| &emb.data()[i * d..(i + 1) * d];
    match variant {
        LossVariant::Contrastive => {
            for i in 0..b {
                for j in (i + 1)..b {
                    let dist2 = sq_dist(row(i), row(j));
                    // close pairs blow up the curvature of the square root
                    if dist2.sqrt() < 0.1 {
                        return false;
                    }
                    if labels[i] != labels[j] && (dist2.sqrt() - margin).abs() < 1e-3 {
                        return false;
                    }
                }
            }
            true
        }
        LossVariant::Triplet => {
            for a in 0..b {
                for p in 0..b {
                    if p == a || labels[p] != labels[a] {
                        continue;
                    }
                    for n in 0..b {
                        if labels[n] == labels[a] {
                            continue;
                        }
                        let gap = sq_dist(row(a), row(p)) - sq_dist(row(a), row(n)) + margin;
                        if gap.abs() < 1e-3 {
                            return false;
                        }
                    }
                }
            }
            true
        }
        _ => true,
    }
}

fn sample_scenario(rng: &mut ChaCha8Rng, variant: LossVariant) -> Result<Scenario> {
    for _ in 0..5000 {
        let d = rng.gen_range(1..=8usize);
        let b = rng.gen_range(3..=8usize);
        let classes = rng.gen_range(2..=4usize);
        let per_class = rng.gen_range(1..=(12 / classes));
        let n = classes * per_class;

        let centers = Tensor::matrix(n, d, uniform(rng, n * d, 0.8))?;
        let center_labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
        let lw_values = uniform(rng, n, 0.5);
        let bank = CenterBank::new(centers, center_labels, lw_values.clone(), classes)?;

        // k = 1 leaves the single neighbour as its own reference maximum, so
        // the computed loss is locally constant and carries no slope to
        // compare against; sample truncated neighbourhoods only for k >= 2.
        let k_neighbours = if rng.gen::<bool>() && n > 2 {
            Some(rng.gen_range(2..n))
        } else {
            None
        };
        let cfg = KernelConfig {
            sigma: 1.5 + rng.gen::<f64>() * 1.5,
            k_neighbours,
            centers_per_class: per_class,
        };

        let mut labels_a: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        // guarantee a same-class pair and a cross-class item so that no
        // pair- or triple-based loss degenerates
        labels_a[0] = 0;
        labels_a[1] = 0;
        labels_a[2] = 1;
        let labels_b: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();

        let emb = Tensor::matrix(b, d, uniform(rng, b * d, 0.8))?;
        let mixed = Tensor::matrix(b, d, uniform(rng, b * d, 0.8))?;
        let logits = Tensor::matrix(b, classes, uniform(rng, b * classes, 1.0))?;
        let lw = Tensor::vector(lw_values);
        let lambda = 0.1 + rng.gen::<f64>() * 0.8;
        let alpha = 0.25 + rng.gen::<f64>() * 1.75;

        let k = cfg.effective_k(bank.len());
        let need_a: Vec<Vec<usize>> = labels_a.iter().map(|&c| vec![c]).collect();
        let need_ab: Vec<Vec<usize>> = labels_a
            .iter()
            .zip(&labels_b)
            .map(|(&a, &b)| vec![a, b])
            .collect();
        let guards_ok = match variant {
            LossVariant::Kernel | LossVariant::MixupSum => {
                k_gap_ok(&emb, &bank, k) && classes_covered(&emb, &bank, k, &need_a)
            }
            LossVariant::MixupEmbed => {
                k_gap_ok(&mixed, &bank, k) && classes_covered(&mixed, &bank, k, &need_ab)
            }
            LossVariant::MixupBoth => {
                k_gap_ok(&emb, &bank, k)
                    && k_gap_ok(&mixed, &bank, k)
                    && classes_covered(&emb, &bank, k, &need_a)
                    && classes_covered(&mixed, &bank, k, &need_ab)
            }
            LossVariant::Contrastive | LossVariant::Triplet => {
                let margin = LossSpec { variant, alpha: 1.0, margin: None }.margin_for();
                hinges_clear(variant, &emb, &labels_a, margin)
            }
            _ => true,
        };
        if !guards_ok {
            continue;
        }

        return Ok(Scenario {
            bank,
            cfg,
            emb,
            mixed,
            logits,
            labels_a,
            labels_b,
            lw,
            lambda,
            alpha,
        });
    }
    Err(Error::InvalidArgument(
        "could not draw a well-conditioned scenario".to_string(),
    ))
}

/// Worst relative error for each differentiable input of one variant.
fn check_gradients(variant: LossVariant, s: &Scenario) -> Result<Vec<(&'static str, f64)>> {
    const EPS: f64 = 1e-5;
    let mut results = Vec::new();

    match variant {
        LossVariant::Kernel => {
            results.push((
                "embeddings",
                finite_difference_check(
                    |tape, x| {
                        let lw = tape.leaf(s.lw.clone(), false);
                        kernel_batch_node(tape, x, &s.labels_a, lw, &s.bank, &s.cfg)
                    },
                    &s.emb,
                    EPS,
                )?,
            ));
            results.push((
                "log_weights",
                finite_difference_check(
                    |tape, w| {
                        let e = tape.leaf(s.emb.clone(), false);
                        kernel_batch_node(tape, e, &s.labels_a, w, &s.bank, &s.cfg)
                    },
                    &s.lw,
                    EPS,
                )?,
            ));
        }
        LossVariant::Mixup => {
            results.push((
                "logits",
                finite_difference_check(
                    |tape, x| {
                        mixup_ce_on_logits_node(tape, x, &s.labels_a, &s.labels_b, s.lambda)
                    },
                    &s.logits,
                    EPS,
                )?,
            ));
        }
        LossVariant::MixupSum => {
            results.push((
                "embeddings",
                finite_difference_check(
                    |tape, x| {
                        let lw = tape.leaf(s.lw.clone(), false);
                        let lg = tape.leaf(s.logits.clone(), false);
                        mixup_sum_node(
                            tape, x, &s.labels_a, lw, &s.bank, &s.cfg, lg, &s.labels_b, s.lambda,
                        )
                    },
                    &s.emb,
                    EPS,
                )?,
            ));
            results.push((
                "logits",
                finite_difference_check(
                    |tape, lg| {
                        let lw = tape.leaf(s.lw.clone(), false);
                        let e = tape.leaf(s.emb.clone(), false);
                        mixup_sum_node(
                            tape, e, &s.labels_a, lw, &s.bank, &s.cfg, lg, &s.labels_b, s.lambda,
                        )
                    },
                    &s.logits,
                    EPS,
                )?,
            ));
            results.push((
                "log_weights",
                finite_difference_check(
                    |tape, w| {
                        let e = tape.leaf(s.emb.clone(), false);
                        let lg = tape.leaf(s.logits.clone(), false);
                        mixup_sum_node(
                            tape, e, &s.labels_a, w, &s.bank, &s.cfg, lg, &s.labels_b, s.lambda,
                        )
                    },
                    &s.lw,
                    EPS,
                )?,
            ));
        }
        LossVariant::MixupEmbed => {
            results.push((
                "embeddings",
                finite_difference_check(
                    |tape, x| {
                        let lw = tape.leaf(s.lw.clone(), false);
                        mixup_embed_node(
                            tape, x, &s.labels_a, &s.labels_b, s.lambda, lw, &s.bank, &s.cfg,
                        )
                    },
                    &s.mixed,
                    EPS,
                )?,
            ));
            results.push((
                "log_weights",
                finite_difference_check(
                    |tape, w| {
                        let m = tape.leaf(s.mixed.clone(), false);
                        mixup_embed_node(
                            tape, m, &s.labels_a, &s.labels_b, s.lambda, w, &s.bank, &s.cfg,
                        )
                    },
                    &s.lw,
                    EPS,
                )?,
            ));
        }
        LossVariant::MixupBoth => {
            results.push((
                "embeddings",
                finite_difference_check(
                    |tape, x| {
                        let lw = tape.leaf(s.lw.clone(), false);
                        let m = tape.leaf(s.mixed.clone(), false);
                        mixup_both_node(
                            tape, x, &s.labels_a, m, &s.labels_b, s.lambda, s.alpha, lw, &s.bank,
                            &s.cfg,
                        )
                    },
                    &s.emb,
                    EPS,
                )?,
            ));
            results.push((
                "mixed embeddings",
                finite_difference_check(
                    |tape, m| {
                        let lw = tape.leaf(s.lw.clone(), false);
                        let e = tape.leaf(s.emb.clone(), false);
                        mixup_both_node(
                            tape, e, &s.labels_a, m, &s.labels_b, s.lambda, s.alpha, lw, &s.bank,
                            &s.cfg,
                        )
                    },
                    &s.mixed,
                    EPS,
                )?,
            ));
            results.push((
                "log_weights",
                finite_difference_check(
                    |tape, w| {
                        let e = tape.leaf(s.emb.clone(), false);
                        let m = tape.leaf(s.mixed.clone(), false);
                        mixup_both_node(
                            tape, e, &s.labels_a, m, &s.labels_b, s.lambda, s.alpha, w, &s.bank,
                            &s.cfg,
                        )
                    },
                    &s.lw,
                    EPS,
                )?,
            ));
        }
        LossVariant::Contrastive => {
            let margin = LossSpec { variant, alpha: 1.0, margin: None }.margin_for();
            results.push((
                "embeddings",
                finite_difference_check(
                    |tape, x| contrastive_loss_node(tape, x, &s.labels_a, margin),
                    &s.emb,
                    EPS,
                )?,
            ));
        }
        LossVariant::Triplet => {
            let margin = LossSpec { variant, alpha: 1.0, margin: None }.margin_for();
            results.push((
                "embeddings",
                finite_difference_check(
                    |tape, x| {
                        let (node, degenerate) = triplet_loss_node(tape, x, &s.labels_a, margin)?;
                        if degenerate {
                            return Err(Error::InvalidArgument("degenerate batch".to_string()));
                        }
                        Ok(node)
                    },
                    &s.emb,
                    EPS,
                )?,
            ));
        }
        LossVariant::Nca => {
            results.push((
                "embeddings",
                finite_difference_check(
                    |tape, x| {
                        let (node, degenerate) = nca_loss_node(tape, x, &s.labels_a)?;
                        if degenerate {
                            return Err(Error::InvalidArgument("degenerate batch".to_string()));
                        }
                        Ok(node)
                    },
                    &s.emb,
                    EPS,
                )?,
            ));
        }
    }
    Ok(results)
}

#[test]
fn c1_gradients_match_central_differences_on_random_configurations() {
    let body = || -> Result<Vec<String>> {
        const TOL: f64 = 1e-5;
        let variants = [
            LossVariant::Kernel,
            LossVariant::Mixup,
            LossVariant::MixupSum,
            LossVariant::MixupEmbed,
            LossVariant::MixupBoth,
            LossVariant::Contrastive,
            LossVariant::Triplet,
            LossVariant::Nca,
        ];
        let started = Instant::now();
        let mut failures = Vec::new();
        for (vi, &variant) in variants.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED + vi as u64);
            for case in 0..50 {
                let s = sample_scenario(&mut rng, variant)?;
                for (input, worst) in check_gradients(variant, &s)? {
                    if worst > TOL {
                        failures.push(format!(
                            "{} case {case}, {input}: relative error {worst:.3e} exceeds {TOL:.0e}",
                            variant.name()
                        ));
                    }
                }
            }
        }
        let elapsed = started.elapsed().as_secs_f64();
        println!("[acceptance]   gradient battery took {elapsed:.1}s");
        if elapsed >= 60.0 {
            failures.push(format!("battery took {elapsed:.1}s, budget is 60s"));
        }
        Ok(failures)
    };
    report(1, body());
}

// ---------------------------------------------------------------------------
// criterion 2: probability normalization and weight-scaling invariance
// ---------------------------------------------------------------------------

#[test]
fn c2_class_probabilities_normalize_and_ignore_common_weight_scaling() {
    let body = || -> Result<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 20);
        let mut failures = Vec::new();
        for draw in 0..1000 {
            let d = rng.gen_range(1..=8usize);
            let classes = rng.gen_range(1..=4usize);
            let per_class = rng.gen_range(1..=(12 / classes));
            let n = classes * per_class;
            let centers = Tensor::matrix(n, d, uniform(&mut rng, n * d, 2.0))?;
            let labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
            let lw = uniform(&mut rng, n, 1.0);
            let bank = CenterBank::new(centers, labels, lw.clone(), classes)?;
            // log-uniform over [0.1, 100]
            let sigma = 0.1 * 1000f64.powf(rng.gen::<f64>());
            let k_neighbours = if rng.gen::<bool>() && n > 1 {
                Some(rng.gen_range(1..=n))
            } else {
                None
            };
            let cfg = KernelConfig { sigma, k_neighbours, centers_per_class: per_class };
            let x = uniform(&mut rng, d, 2.0);

            let probs = class_probabilities(&x, &bank, &cfg)?;
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                failures.push(format!("draw {draw}: probabilities sum to {total:.12}"));
            }

            let shift = rng.gen::<f64>() * 6.0 - 3.0;
            let shifted: Vec<f64> = lw.iter().map(|w| w + shift).collect();
            let mut scaled_bank = bank.clone();
            scaled_bank.set_log_weights(shifted)?;
            let scaled = class_probabilities(&x, &scaled_bank, &cfg)?;
            for (c, (&p, &q)) in probs.iter().zip(&scaled).enumerate() {
                if (p - q).abs() > 1e-12 {
                    failures.push(format!(
                        "draw {draw} class {c}: common weight scaling moved {p:.15} to {q:.15}"
                    ));
                }
            }
            if failures.len() > 5 {
                break;
            }
        }
        Ok(failures)
    };
    report(2, body());
}

// ---------------------------------------------------------------------------
// criterion 3: exact identities between the combined losses
// ---------------------------------------------------------------------------

#[test]
fn c3_loss_identities_hold_exactly() {
    let body = || -> Result<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 30);
        let s = sample_scenario(&mut rng, LossVariant::MixupBoth)?;
        let mut failures = Vec::new();

        // the summed loss equals its two terms added in the same order
        {
            let mut tape = Tape::new();
            let e = tape.leaf(s.emb.clone(), false);
            let lw = tape.leaf(s.lw.clone(), false);
            let lg = tape.leaf(s.logits.clone(), false);
            let combined = mixup_sum_node(
                &mut tape, e, &s.labels_a, lw, &s.bank, &s.cfg, lg, &s.labels_b, s.lambda,
            )?;
            let kernel_part = kernel_batch_node(&mut tape, e, &s.labels_a, lw, &s.bank, &s.cfg)?;
            let mixed_part =
                mixup_ce_on_logits_node(&mut tape, lg, &s.labels_a, &s.labels_b, s.lambda)?;
            let lhs = tape.scalar_value(combined)?;
            let rhs = tape.scalar_value(kernel_part)? + tape.scalar_value(mixed_part)?;
            if (lhs - rhs).abs() > 1e-12 {
                failures.push(format!("sum split: {lhs:.17} vs {rhs:.17}"));
            }
        }

        // with a zero blend weight the two-term loss collapses onto the plain
        // kernel loss, gradients included
        {
            let mut full = Tape::new();
            let e1 = full.leaf(s.emb.clone(), true);
            let m1 = full.leaf(s.mixed.clone(), true);
            let w1 = full.leaf(s.lw.clone(), true);
            let both = mixup_both_node(
                &mut full, e1, &s.labels_a, m1, &s.labels_b, s.lambda, 0.0, w1, &s.bank, &s.cfg,
            )?;
            let both_value = full.scalar_value(both)?;
            full.backward(both)?;

            let mut plain = Tape::new();
            let e2 = plain.leaf(s.emb.clone(), true);
            let w2 = plain.leaf(s.lw.clone(), true);
            let kernel = kernel_batch_node(&mut plain, e2, &s.labels_a, w2, &s.bank, &s.cfg)?;
            let kernel_value = plain.scalar_value(kernel)?;
            plain.backward(kernel)?;

            if both_value != kernel_value {
                failures.push(format!(
                    "zero blend weight: {both_value:.17} vs {kernel_value:.17}"
                ));
            }
            if full.grad(e1).unwrap() != plain.grad(e2).unwrap() {
                failures.push("zero blend weight: embedding gradients differ".to_string());
            }
            if full.grad(w1).unwrap() != plain.grad(w2).unwrap() {
                failures.push("zero blend weight: weight gradients differ".to_string());
            }
        }

        // lambda = 1 reduces the interpolated objectives to plain
        // cross-entropy against the first parent
        {
            let mut tape = Tape::new();
            let lg = tape.leaf(s.logits.clone(), false);
            let interpolated =
                mixup_ce_on_logits_node(&mut tape, lg, &s.labels_a, &s.labels_b, 1.0)?;
            let logp = tape.log_softmax(lg)?;
            let picked = tape.pick_per_row(logp, &s.labels_a)?;
            let mean = tape.mean(picked)?;
            let plain = tape.mul_scalar(mean, -1.0)?;
            if tape.scalar_value(interpolated)? != tape.scalar_value(plain)? {
                failures.push("lambda=1 logit loss differs from plain cross-entropy".to_string());
            }

            let probs = Tensor::vector(vec![0.55, 0.25, 0.2]);
            let p = tape.leaf(probs, false);
            let lhs = mixup_loss_node(&mut tape, p, 0, 2, 1.0)?;
            let rhs = kernmix::mixup::cross_entropy_node(&mut tape, p, 0)?;
            if tape.scalar_value(lhs)? != tape.scalar_value(rhs)? {
                failures.push("lambda=1 probability loss differs from cross-entropy".to_string());
            }
        }

        // lambda = 1 blending leaves the batch bit-identical
        {
            let inputs = Tensor::matrix(5, 3, uniform(&mut rng, 15, 1.0))?;
            let labels = vec![0, 1, 2, 1, 0];
            let mut mix_rng = ChaCha8Rng::seed_from_u64(SEED + 31);
            let batch = mix_batch(&inputs, &labels, 1.0, &mut mix_rng, false)?;
            if batch.inputs.data() != inputs.data() || batch.labels_a != labels {
                failures.push("lambda=1 blending changed the batch".to_string());
            }
        }

        Ok(failures)
    };
    report(3, body());
}

// ---------------------------------------------------------------------------
// criterion 4: neighbourhood selection against a brute-force oracle
// ---------------------------------------------------------------------------

#[test]
fn c4_neighbourhood_matches_brute_force_selection() {
    let body = || -> Result<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 40);
        let mut failures = Vec::new();
        let d = 6;
        for &n in &[12usize, 100, 1000] {
            let classes = 4;
            let centers = Tensor::matrix(n, d, uniform(&mut rng, n * d, 1.0))?;
            let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            let bank = CenterBank::new(centers, labels, vec![0.0; n], classes)?;
            for query_no in 0..200 {
                let q = uniform(&mut rng, d, 1.0);
                let k = rng.gen_range(1..=n);
                let mut got = neighbourhood(&q, &bank, k)?;
                got.sort_unstable();

                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&i, &j| {
                    sq_dist(&q, bank.centers().row(i).unwrap())
                        .partial_cmp(&sq_dist(&q, bank.centers().row(j).unwrap()))
                        .unwrap()
                });
                let mut want: Vec<usize> = order[..k].to_vec();
                want.sort_unstable();

                if got != want {
                    failures.push(format!(
                        "bank of {n}, query {query_no}, k={k}: selection disagrees"
                    ));
                    if failures.len() > 5 {
                        return Ok(failures);
                    }
                }
            }
        }
        Ok(failures)
    };
    report(4, body());
}

// ---------------------------------------------------------------------------
// criterion 5: hand-worked numeric examples
// ---------------------------------------------------------------------------

#[test]
fn c5_hand_worked_values_reproduce() {
    let body = || -> Result<Vec<String>> {
        let mut failures = Vec::new();
        let mut check = |name: &str, got: f64, want: f64| {
            if (got - want).abs() > 1e-4 {
                failures.push(format!("{name}: got {got:.5}, expected {want:.5}"));
            }
        };

        // two unit-weight centers on a line, query sitting on the first
        let bank = CenterBank::new(
            Tensor::matrix(2, 1, vec![0.0, 2.0])?,
            vec![0, 1],
            vec![0.0, 0.0],
            2,
        )?;
        let cfg = KernelConfig { sigma: 1.0, k_neighbours: Some(2), centers_per_class: 1 };
        let x = [0.0];

        let probs = class_probabilities(&x, &bank, &cfg)?;
        check("true-class probability", probs[0], 0.88080);
        check("classifier loss", kernel_loss(&x, 0, &bank, &cfg)?, 0.12693);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.8, 0.2]), false);
        let interpolated = mixup_loss_node(&mut tape, p, 0, 1, 0.5)?;
        check(
            "interpolated cross-entropy",
            tape.scalar_value(interpolated)?,
            0.91629,
        );

        let lw = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let mixed = tape.leaf(Tensor::matrix(1, 1, vec![0.0])?, false);
        let embed_term = mixup_embed_node(&mut tape, mixed, &[0], &[1], 0.5, lw, &bank, &cfg)?;
        check(
            "interpolated classifier loss",
            tape.scalar_value(embed_term)?,
            1.12693,
        );

        let clean = tape.leaf(Tensor::matrix(1, 1, vec![0.0])?, false);
        let both = mixup_both_node(
            &mut tape, clean, &[0], mixed, &[1], 0.5, 1.0, lw, &bank, &cfg,
        )?;
        check("blended two-term loss", tape.scalar_value(both)?, 1.25386);

        // the summed variant on the same numbers: logits reproducing (0.8, 0.2)
        let logits = tape.leaf(Tensor::matrix(1, 2, vec![0.8f64.ln(), 0.2f64.ln()])?, false);
        let summed = mixup_sum_node(
            &mut tape, clean, &[0], lw, &bank, &cfg, logits, &[1], 0.5,
        )?;
        check("summed two-term loss", tape.scalar_value(summed)?, 1.04322);

        Ok(failures)
    };
    report(5, body());
}

// ---------------------------------------------------------------------------
// criteria 6 and 7: desk-scale training runs
// ---------------------------------------------------------------------------

fn blobs_acceptance_config(variant: LossVariant) -> TrainConfig {
    TrainConfig {
        dataset: DatasetConfig::Blobs {
            classes: 4,
            per_class: 100,
            test_per_class: 50,
            dim: 2,
            spread: 0.04,
        },
        loss: LossSpec { variant, alpha: 1.0, margin: None },
        kernel: KernelConfig { sigma: 1.0, k_neighbours: None, centers_per_class: 10 },
        net: NetSpec::MlpSmall { in_dim: 2 },
        embed_dim: 16,
        batch_size: 32,
        epochs: 200,
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        lr_decay_epoch: None,
        lr_decay_factor: 0.1,
        alpha_mix: 1.0,
        avoid_same_label_mixing: false,
        labeled_fraction: 1.0,
        labeled_total: None,
        split_mode: SplitMode::Folds,
        fold_index: 0,
        eval_every: 20,
        unit_norm: false,
        refresh_centers_every: Some(10),
        seed: 42,
    }
}

#[test]
fn c6_blob_training_reaches_target_accuracy_for_each_combined_variant() {
    let body = || -> Result<Vec<String>> {
        let mut failures = Vec::new();
        for variant in [
            LossVariant::MixupSum,
            LossVariant::MixupEmbed,
            LossVariant::MixupBoth,
        ] {
            let cfg = blobs_acceptance_config(variant);
            let record = train(&cfg, None)?;
            println!(
                "[acceptance]   blobs {}: {:.2}% in {:.0}s",
                variant.name(),
                record.final_accuracy,
                record.timing.total_seconds
            );
            if record.final_accuracy < 95.0 {
                failures.push(format!(
                    "{} reached only {:.2}%",
                    variant.name(),
                    record.final_accuracy
                ));
            }
            if record.timing.total_seconds >= 300.0 {
                failures.push(format!(
                    "{} took {:.0}s, budget is 300s",
                    variant.name(),
                    record.timing.total_seconds
                ));
            }
        }
        Ok(failures)
    };
    report(6, body());
}

fn digits_acceptance_config(variant: LossVariant) -> TrainConfig {
    TrainConfig {
        dataset: DatasetConfig::Mnist {
            dir: Some(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data").to_string()),
        },
        loss: LossSpec { variant, alpha: 1.0, margin: None },
        kernel: KernelConfig { sigma: 0.5, k_neighbours: None, centers_per_class: 10 },
        net: NetSpec::ConvTiny { height: 28, width: 28, channels: 1 },
        embed_dim: 32,
        batch_size: 32,
        epochs: 200,
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        lr_decay_epoch: None,
        lr_decay_factor: 0.1,
        alpha_mix: 1.0,
        avoid_same_label_mixing: false,
        labeled_fraction: 0.10,
        labeled_total: Some(5000),
        split_mode: SplitMode::Independent,
        fold_index: 0,
        eval_every: 25,
        unit_norm: true,
        refresh_centers_every: Some(10),
        seed: 42,
    }
}

#[test]
fn c7_digit_training_reaches_target_accuracy_with_sparse_labels() {
    let body = || -> Result<Vec<String>> {
        let mut failures = Vec::new();
        let summed = train(&digits_acceptance_config(LossVariant::MixupSum), None)?;
        let plain = train(&digits_acceptance_config(LossVariant::Kernel), None)?;
        println!(
            "[acceptance]   digits, 5000 labels: {} {:.2}% vs {} {:.2}%",
            LossVariant::MixupSum.name(),
            summed.final_accuracy,
            LossVariant::Kernel.name(),
            plain.final_accuracy
        );
        if summed.final_accuracy < 90.0 {
            failures.push(format!(
                "{} reached only {:.2}%",
                LossVariant::MixupSum.name(),
                summed.final_accuracy
            ));
        }
        if plain.final_accuracy < 88.0 {
            failures.push(format!(
                "{} reached only {:.2}%",
                LossVariant::Kernel.name(),
                plain.final_accuracy
            ));
        }
        Ok(failures)
    };
    report(7, body());
}

// ---------------------------------------------------------------------------
// criterion 8: relative-gain arithmetic on published accuracy pairs
// ---------------------------------------------------------------------------

#[test]
fn c8_relative_gain_reproduces_published_pairs() {
    let body = || -> Result<Vec<String>> {
        let mut failures = Vec::new();
        for &(baseline, new, want) in &[
            (87.80, 91.09, 3.75),
            (82.73, 88.10, 6.49),
            (90.40, 92.85, 2.71),
        ] {
            let got = round2(relative_gain(baseline, new)?);
            if (got - want).abs() > 0.01 {
                failures.push(format!(
                    "gain({baseline}, {new}): got {got:.2}, expected {want:.2}"
                ));
            }
        }
        Ok(failures)
    };
    report(8, body());
}

// ---------------------------------------------------------------------------
// criterion 9: byte-level reproducibility of a committed run
// ---------------------------------------------------------------------------

#[test]
fn c9_reruns_write_bit_identical_metrics() {
    let body = || -> Result<Vec<String>> {
        let mut cfg = blobs_acceptance_config(LossVariant::MixupBoth);
        cfg.dataset = DatasetConfig::Blobs {
            classes: 4,
            per_class: 24,
            test_per_class: 10,
            dim: 2,
            spread: 0.04,
        };
        cfg.embed_dim = 8;
        cfg.epochs = 8;
        cfg.eval_every = 2;
        cfg.refresh_centers_every = Some(4);

        let dir = tempfile::tempdir().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let first = dir.path().join("first");
        let second = dir.path().join("second");
        std::fs::create_dir_all(&first).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::create_dir_all(&second).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        train(&cfg, Some(&first))?;
        train(&cfg, Some(&second))?;

        let mut failures = Vec::new();
        for file in ["metrics.jsonl", "summary.json", "config.toml"] {
            let a = std::fs::read(first.join(file))
                .map_err(|e| Error::InvalidArgument(format!("{file}: {e}")))?;
            let b = std::fs::read(second.join(file))
                .map_err(|e| Error::InvalidArgument(format!("{file}: {e}")))?;
            if a != b {
                failures.push(format!("{file} differs between identical runs"));
            }
        }
        Ok(failures)
    };
    report(9, body());
}
