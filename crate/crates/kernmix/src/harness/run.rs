//! One training run: load data, carve the labeled slice, loop epochs of
//! shuffled mini-batches through the configured loss, track metrics, and
//! persist everything needed to reproduce or re-evaluate the run.
//!
//! Every random draw comes from a stream-isolated seed derived from the run
//! seed, so a (config, seed) pair fixes the full trajectory bit for bit.
//! Wall-clock timing is kept out of the deterministic records and lands in
//! its own sidecar file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::blobs::make_blobs;
use crate::data::cifar::load_cifar;
use crate::data::idx::load_idx;
use crate::data::split::{folds, independent_draws, SplitMode, SplitPlan};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::config::{DatasetConfig, TrainConfig};
use crate::kernel::{classify, init_centers, kernel_batch_node, save_bank, CenterBank};
use crate::losses::{
    contrastive_loss_node, mixup_both_node, mixup_embed_node, mixup_sum_node, nca_loss_node,
    triplet_loss_node, LossVariant,
};
use crate::mixup::{mix_batch, mixup_ce_on_logits_node, sample_lambda};
use crate::net::{normalize_rows_node, save_net, EmbeddingNet, Sgd};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

const STREAM_NET: u64 = 1;
const STREAM_CENTERS: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_MIX: u64 = 5;
const STREAM_BLOBS_TRAIN: u64 = 6;
const STREAM_BLOBS_TEST: u64 = 7;

/// Splitmix-style derivation keeping the per-purpose RNG streams apart.
fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of the metrics file. The initial evaluation sits at epoch 0 with
/// no training loss; epochs that skip evaluation leave the accuracy empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Wall-clock timings, persisted separately so the metric files stay
/// byte-reproducible.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub epoch_seconds: Vec<f64>,
}

/// The full outcome of one run. Equality ignores timing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub variant: LossVariant,
    pub final_accuracy: f64,
    pub epochs: Vec<EpochMetric>,
    #[serde(skip)]
    pub timing: Timing,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.config_hash == other.config_hash
            && self.seed == other.seed
            && self.variant == other.variant
            && self.final_accuracy == other.final_accuracy
            && self.epochs == other.epochs
    }
}

/// Loads the configured training and test sets.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Blobs {
            classes,
            per_class,
            test_per_class,
            dim,
            spread,
        } => (
            make_blobs(
                *classes,
                *per_class,
                *dim,
                *spread,
                sub_seed(cfg.seed, STREAM_BLOBS_TRAIN, 0),
            )?,
            make_blobs(
                *classes,
                *test_per_class,
                *dim,
                *spread,
                sub_seed(cfg.seed, STREAM_BLOBS_TEST, 0),
            )?,
        ),
        DatasetConfig::Mnist { dir } => {
            let root = dir
                .clone()
                .or_else(|| std::env::var("KERNMIX_DATA_DIR").ok())
                .unwrap_or_else(|| "./data".to_string());
            let root = PathBuf::from(root).join("mnist");
            (
                load_idx(
                    &root.join("train-images-idx3-ubyte"),
                    &root.join("train-labels-idx1-ubyte"),
                )?,
                load_idx(
                    &root.join("t10k-images-idx3-ubyte"),
                    &root.join("t10k-labels-idx1-ubyte"),
                )?,
            )
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx(Path::new(train_images), Path::new(train_labels))?,
            load_idx(Path::new(test_images), Path::new(test_labels))?,
        ),
        DatasetConfig::Cifar {
            train_batches,
            test_batches,
        } => (load_cifar(train_batches)?, load_cifar(test_batches)?),
    };
    if train.num_classes != test.num_classes {
        return Err(Error::Config(format!(
            "train set has {} classes but test set has {}",
            train.num_classes, test.num_classes
        )));
    }
    Ok((train, test))
}

fn fold_count_for(fraction: f64) -> usize {
    (1.0 / fraction).round().max(1.0) as usize
}

/// The split plan the config implies for this training set. For fold mode
/// the fold count follows from the labeled fraction; for independent mode,
/// `count` controls how many draws to emit (at least enough to cover the
/// configured fold index).
pub fn split_plan(cfg: &TrainConfig, train: &Dataset, count: Option<usize>) -> Result<SplitPlan> {
    let fraction = cfg.effective_fraction(train.len())?;
    let split_seed = sub_seed(cfg.seed, STREAM_SPLIT, 0);
    match cfg.split_mode {
        SplitMode::Folds => folds(train, fold_count_for(fraction), split_seed),
        SplitMode::Independent => {
            let n = count.unwrap_or(0).max(cfg.fold_index + 1);
            independent_draws(train, n, fraction, split_seed)
        }
    }
}

/// The labeled indices this run trains on.
pub fn labeled_indices(cfg: &TrainConfig, train: &Dataset) -> Result<Vec<usize>> {
    let plan = split_plan(cfg, train, None)?;
    Ok(plan.fold(cfg.fold_index)?.to_vec())
}

/// Scales each row to unit length, matching the tape-side normalization
/// operation bit for bit.
pub(crate) fn normalize_rows(t: &mut Tensor) {
    let Ok(d) = t.row_len() else { return };
    if d == 0 {
        return;
    }
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().max(1e-24).sqrt();
        for v in row {
            *v /= norm;
        }
    }
}

/// Embeds every item without building gradients, in bounded chunks.
pub fn embed_all(net: &EmbeddingNet, inputs: &Tensor, unit_norm: bool) -> Result<Tensor> {
    let n = *inputs
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidArgument("embed_all needs a batched input".to_string()))?;
    let indices: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n * net.embed_dim());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let part = inputs.gather_rows(chunk)?;
        let (emb, _) = net.forward(&part, false)?;
        out.extend_from_slice(emb.data());
    }
    let mut t = Tensor::matrix(n, net.embed_dim(), out)?;
    if unit_norm {
        normalize_rows(&mut t);
    }
    Ok(t)
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Test accuracy in percent. The pure-Mixup variant predicts from its logit
/// head; every other variant classifies through the Gaussian kernel over a
/// center bank.
pub fn evaluate(
    net: &EmbeddingNet,
    bank: Option<&CenterBank>,
    cfg: &TrainConfig,
    test: &Dataset,
) -> Result<f64> {
    let n = test.len();
    let mut correct = 0usize;
    if cfg.loss.variant == LossVariant::Mixup {
        let indices: Vec<usize> = (0..n).collect();
        for chunk in indices.chunks(EVAL_CHUNK) {
            let part = test.inputs.gather_rows(chunk)?;
            let (_, logits) = net.forward(&part, true)?;
            let logits = logits.expect("logit head requested");
            for (row, &i) in chunk.iter().enumerate().map(|(r, i)| (r, i)) {
                let scores = logits.row(row)?;
                if argmax_lowest(scores) == test.labels[i] {
                    correct += 1;
                }
            }
        }
    } else {
        let bank = bank.ok_or_else(|| {
            Error::InvalidArgument("kernel evaluation needs a center bank".to_string())
        })?;
        if bank.dim() != net.embed_dim() {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                lhs: vec![bank.dim()],
                rhs: vec![net.embed_dim()],
            });
        }
        let embeddings = embed_all(net, &test.inputs, cfg.unit_norm)?;
        for i in 0..n {
            if classify(embeddings.row(i)?, bank, &cfg.kernel)? == test.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / n as f64)
}

/// A center bank over the current embeddings of the labeled set, with
/// uniform weights unless existing log weights are carried over.
fn bank_from_embeddings(
    cfg: &TrainConfig,
    net: &EmbeddingNet,
    labeled: &Dataset,
    keep_weights: Option<&Tensor>,
) -> Result<CenterBank> {
    let embeddings = embed_all(net, &labeled.inputs, cfg.unit_norm)?;
    let mut bank = init_centers(
        &embeddings,
        &labeled.labels,
        labeled.num_classes,
        cfg.kernel.centers_per_class,
        sub_seed(cfg.seed, STREAM_CENTERS, 0),
    )?;
    if let Some(w) = keep_weights {
        bank.set_log_weights(w.data().to_vec())?;
    }
    Ok(bank)
}

/// The bank evaluation should use right now, if the variant uses one.
fn current_eval_bank(
    cfg: &TrainConfig,
    net: &EmbeddingNet,
    labeled: &Dataset,
    bank: Option<&CenterBank>,
    log_weights: Option<&Tensor>,
) -> Result<Option<CenterBank>> {
    let variant = cfg.loss.variant;
    if variant == LossVariant::Mixup {
        return Ok(None);
    }
    if variant.trains_kernel() {
        let mut b = bank.expect("kernel variants carry a bank").clone();
        b.set_log_weights(log_weights.expect("kernel variants train weights").data().to_vec())?;
        return Ok(Some(b));
    }
    // distance-only baselines: classify through a fresh bank over the
    // current embeddings
    bank_from_embeddings(cfg, net, labeled, None).map(Some)
}

fn forward_embeddings(
    tape: &mut Tape,
    net: &EmbeddingNet,
    param_ids: &[NodeId],
    inputs: &Tensor,
    unit_norm: bool,
) -> Result<NodeId> {
    let x = tape.leaf(inputs.clone(), false);
    let (emb, _) = net.forward_on(tape, param_ids, x, false)?;
    if unit_norm {
        normalize_rows_node(tape, emb)
    } else {
        Ok(emb)
    }
}

/// One optimizer step over one mini-batch. Returns the loss value, or None
/// when the batch was degenerate for its loss and skipped.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    cfg: &TrainConfig,
    net: &mut EmbeddingNet,
    log_weights: Option<&mut Tensor>,
    bank: Option<&CenterBank>,
    opt: &mut Sgd,
    inputs: &Tensor,
    labels: &[usize],
    mix_rng: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let param_ids = net.insert_params(&mut tape, true);
    let lw_id = log_weights
        .as_ref()
        .map(|t| tape.leaf((**t).clone(), true));

    let variant = cfg.loss.variant;
    let loss = match variant {
        LossVariant::Kernel => {
            let emb = forward_embeddings(&mut tape, net, &param_ids, inputs, cfg.unit_norm)?;
            kernel_batch_node(
                &mut tape,
                emb,
                labels,
                lw_id.expect("kernel variant"),
                bank.expect("kernel variant"),
                &cfg.kernel,
            )?
        }
        LossVariant::Mixup => {
            let lambda = sample_lambda(cfg.alpha_mix, mix_rng)?;
            let mixed = mix_batch(inputs, labels, lambda, mix_rng, cfg.avoid_same_label_mixing)?;
            let x = tape.leaf(mixed.inputs.clone(), false);
            let (_, logits) = net.forward_on(&mut tape, &param_ids, x, true)?;
            mixup_ce_on_logits_node(
                &mut tape,
                logits.expect("logit head requested"),
                &mixed.labels_a,
                &mixed.labels_b,
                lambda,
            )?
        }
        LossVariant::MixupSum => {
            let clean = forward_embeddings(&mut tape, net, &param_ids, inputs, cfg.unit_norm)?;
            let lambda = sample_lambda(cfg.alpha_mix, mix_rng)?;
            let mixed = mix_batch(inputs, labels, lambda, mix_rng, cfg.avoid_same_label_mixing)?;
            let x = tape.leaf(mixed.inputs.clone(), false);
            let (_, logits) = net.forward_on(&mut tape, &param_ids, x, true)?;
            mixup_sum_node(
                &mut tape,
                clean,
                labels,
                lw_id.expect("kernel variant"),
                bank.expect("kernel variant"),
                &cfg.kernel,
                logits.expect("logit head requested"),
                &mixed.labels_b,
                lambda,
            )?
        }
        LossVariant::MixupEmbed => {
            let lambda = sample_lambda(cfg.alpha_mix, mix_rng)?;
            let mixed = mix_batch(inputs, labels, lambda, mix_rng, cfg.avoid_same_label_mixing)?;
            let emb = forward_embeddings(&mut tape, net, &param_ids, &mixed.inputs, cfg.unit_norm)?;
            mixup_embed_node(
                &mut tape,
                emb,
                &mixed.labels_a,
                &mixed.labels_b,
                lambda,
                lw_id.expect("kernel variant"),
                bank.expect("kernel variant"),
                &cfg.kernel,
            )?
        }
        LossVariant::MixupBoth => {
            let clean = forward_embeddings(&mut tape, net, &param_ids, inputs, cfg.unit_norm)?;
            let lambda = sample_lambda(cfg.alpha_mix, mix_rng)?;
            let mixed = mix_batch(inputs, labels, lambda, mix_rng, cfg.avoid_same_label_mixing)?;
            let memb = forward_embeddings(&mut tape, net, &param_ids, &mixed.inputs, cfg.unit_norm)?;
            mixup_both_node(
                &mut tape,
                clean,
                labels,
                memb,
                &mixed.labels_b,
                lambda,
                cfg.loss.alpha,
                lw_id.expect("kernel variant"),
                bank.expect("kernel variant"),
                &cfg.kernel,
            )?
        }
        LossVariant::Contrastive => {
            let emb = forward_embeddings(&mut tape, net, &param_ids, inputs, cfg.unit_norm)?;
            contrastive_loss_node(&mut tape, emb, labels, cfg.loss.margin_for())?
        }
        LossVariant::Triplet => {
            let emb = forward_embeddings(&mut tape, net, &param_ids, inputs, cfg.unit_norm)?;
            let (node, degenerate) = triplet_loss_node(&mut tape, emb, labels, cfg.loss.margin_for())?;
            if degenerate {
                return Ok(None);
            }
            node
        }
        LossVariant::Nca => {
            let emb = forward_embeddings(&mut tape, net, &param_ids, inputs, cfg.unit_norm)?;
            let (node, degenerate) = nca_loss_node(&mut tape, emb, labels)?;
            if degenerate {
                return Ok(None);
            }
            node
        }
    };

    let value = tape.scalar_value(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            value,
        });
    }
    tape.backward(loss)?;

    let mut grads: Vec<Vec<f64>> = param_ids
        .iter()
        .map(|&id| tape.grad(id).expect("parameter gradient").to_vec())
        .collect();
    if let Some(id) = lw_id {
        grads.push(tape.grad(id).expect("weight gradient").to_vec());
    }
    let mut params: Vec<&mut [f64]> = net
        .params_mut()
        .iter_mut()
        .map(|t| t.data_mut())
        .collect();
    if let Some(t) = log_weights {
        params.push(t.data_mut());
    }
    let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    opt.step(&mut params, &grad_refs)?;
    Ok(Some(value))
}

/// Stamps the epoch and batch position onto a numeric blow-up.
fn promote_nonfinite(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFiniteLoss { value, .. } => Error::NonFiniteLoss { epoch, batch, value },
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            epoch,
            batch,
            value: f64::NAN,
        },
        other => other,
    }
}

struct MetricWriter {
    file: Option<fs::File>,
}

impl MetricWriter {
    fn create(out_dir: Option<&Path>) -> Result<Self> {
        let file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|source| Error::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
                let path = dir.join("metrics.jsonl");
                Some(fs::File::create(&path).map_err(|source| Error::Io { path, source })?)
            }
            None => None,
        };
        Ok(MetricWriter { file })
    }

    fn push(&mut self, out_dir: Option<&Path>, metric: &EpochMetric) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(metric)
                .map_err(|e| Error::Config(format!("could not encode metric: {e}")))?;
            writeln!(f, "{line}").map_err(|source| Error::Io {
                path: out_dir.expect("writer exists with out_dir").join("metrics.jsonl"),
                source,
            })?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("could not encode {}: {e}", path.display())))?;
    fs::write(path, json).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a run back from its output directory.
pub fn load_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join("summary.json");
    let bytes = fs::read(&path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path,
        offset: e.column() as u64,
        msg: format!("bad run summary: {e}"),
    })
}

/// Runs the full training loop. With an output directory, writes
/// `metrics.jsonl`, `summary.json`, `timing.json`, `config.toml`, the final
/// network checkpoint, and the final center bank where one exists.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();

    let (train_ds, test_ds) = load_datasets(cfg)?;
    if cfg.net.input_numel() != train_ds.item_numel() {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: vec![train_ds.item_numel()],
            rhs: vec![cfg.net.input_numel()],
        });
    }
    let labeled = labeled_indices(cfg, &train_ds)?;
    let labeled_ds = train_ds.subset(&labeled)?;
    let num_classes = labeled_ds.num_classes;

    let mut net = EmbeddingNet::build(
        cfg.net.clone(),
        cfg.embed_dim,
        num_classes,
        sub_seed(cfg.seed, STREAM_NET, 0),
    )?;
    let variant = cfg.loss.variant;
    let (mut bank, mut log_weights) = if variant.trains_kernel() {
        let bank = bank_from_embeddings(cfg, &net, &labeled_ds, None)?;
        let weights = Tensor::vector(bank.log_weights().to_vec());
        (Some(bank), Some(weights))
    } else {
        (None, None)
    };

    let mut sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
    if let Some(w) = &log_weights {
        sizes.push(w.numel());
    }
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, &sizes)?;

    let mut record = RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        variant,
        final_accuracy: 0.0,
        epochs: Vec::with_capacity(cfg.epochs + 1),
        timing: Timing::default(),
    };
    let mut writer = MetricWriter::create(out_dir)?;

    let eval_now = |net: &EmbeddingNet,
                    bank: Option<&CenterBank>,
                    log_weights: Option<&Tensor>|
     -> Result<f64> {
        let eval_bank = current_eval_bank(cfg, net, &labeled_ds, bank, log_weights)?;
        evaluate(net, eval_bank.as_ref(), cfg, &test_ds)
    };

    let initial = EpochMetric {
        epoch: 0,
        train_loss: None,
        test_accuracy: Some(eval_now(&net, bank.as_ref(), log_weights.as_ref())?),
    };
    writer.push(out_dir, &initial)?;
    record.epochs.push(initial);

    for epoch in 1..=cfg.epochs {
        let epoch_started = Instant::now();
        if cfg.lr_decay_epoch == Some(epoch) {
            opt.learning_rate *= cfg.lr_decay_factor;
        }
        if let (Some(every), Some(w)) = (cfg.refresh_centers_every, &log_weights) {
            if epoch > 1 && (epoch - 1) % every == 0 {
                bank = Some(bank_from_embeddings(cfg, &net, &labeled_ds, Some(w))?);
            }
        }

        let mut order: Vec<usize> = (0..labeled_ds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
            cfg.seed,
            STREAM_SHUFFLE,
            epoch as u64,
        )));
        let mut mix_rng =
            ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_MIX, epoch as u64));

        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                // a singleton batch has no pairs to relate; skip it
                continue;
            }
            let inputs = labeled_ds.inputs.gather_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| labeled_ds.labels[i]).collect();
            match run_batch(
                cfg,
                &mut net,
                log_weights.as_mut(),
                bank.as_ref(),
                &mut opt,
                &inputs,
                &labels,
                &mut mix_rng,
            ) {
                Ok(Some(value)) => {
                    loss_sum += value;
                    counted += 1;
                }
                Ok(None) => {}
                Err(e) => return Err(promote_nonfinite(e, epoch, batch_no)),
            }
        }

        let do_eval = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let metric = EpochMetric {
            epoch,
            train_loss: (counted > 0).then(|| loss_sum / counted as f64),
            test_accuracy: if do_eval {
                Some(eval_now(&net, bank.as_ref(), log_weights.as_ref())?)
            } else {
                None
            },
        };
        writer.push(out_dir, &metric)?;
        record.epochs.push(metric);
        record
            .timing
            .epoch_seconds
            .push(epoch_started.elapsed().as_secs_f64());
    }

    record.final_accuracy = record
        .epochs
        .iter()
        .rev()
        .find_map(|m| m.test_accuracy)
        .expect("at least the initial evaluation ran");
    record.timing.total_seconds = started.elapsed().as_secs_f64();

    if let Some(dir) = out_dir {
        write_json(&dir.join("summary.json"), &record)?;
        write_json(&dir.join("timing.json"), &record.timing)?;
        cfg.save(&dir.join("config.toml"))?;
        save_net(&dir.join("net.kmnt"), &net)?;
        if let (Some(b), Some(w)) = (&mut bank, &log_weights) {
            b.set_log_weights(w.data().to_vec())?;
            save_bank(&dir.join("bank.kmgk"), b, &cfg.kernel)?;
        }
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::tests_support::blobs_config;
    use crate::losses::LossSpec;

    #[test]
    fn zero_epochs_record_only_the_initial_evaluation() {
        let mut cfg = blobs_config(LossVariant::Kernel);
        cfg.epochs = 0;
        let record = train(&cfg, None).unwrap();
        assert_eq!(record.epochs.len(), 1);
        assert_eq!(record.epochs[0].epoch, 0);
        assert!(record.epochs[0].train_loss.is_none());
        let acc = record.epochs[0].test_accuracy.unwrap();
        assert!((0.0..=100.0).contains(&acc));
        assert_eq!(record.final_accuracy, acc);
    }

    #[test]
    fn an_untrained_logit_head_predicts_at_chance() {
        // the kernel classifier is nonparametric and separates easy blobs
        // even through a random net, so the chance-level check belongs to
        // the logit head, which carries no class information before training
        let mut cfg = blobs_config(LossVariant::Mixup);
        cfg.epochs = 0;
        cfg.dataset = DatasetConfig::Blobs {
            classes: 4,
            per_class: 24,
            test_per_class: 10,
            dim: 2,
            spread: 0.30,
        };
        let record = train(&cfg, None).unwrap();
        let acc = record.final_accuracy;
        assert!((5.0..55.0).contains(&acc), "untrained accuracy {acc}");
    }

    #[test]
    fn reruns_are_bit_identical() {
        let mut cfg = blobs_config(LossVariant::MixupSum);
        cfg.epochs = 3;
        let a = train(&cfg, None).unwrap();
        let b = train(&cfg, None).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.test_accuracy, y.test_accuracy);
        }
    }

    #[test]
    fn persisted_files_reproduce_across_runs() {
        let mut cfg = blobs_config(LossVariant::MixupEmbed);
        cfg.epochs = 2;
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let record = train(&cfg, Some(dir_a.path())).unwrap();
        train(&cfg, Some(dir_b.path())).unwrap();
        for name in ["metrics.jsonl", "summary.json", "config.toml"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        assert_eq!(load_record(dir_a.path()).unwrap(), record);
        let lines = fs::read_to_string(dir_a.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), cfg.epochs + 1);
        assert!(dir_a.path().join("net.kmnt").exists());
        assert!(dir_a.path().join("bank.kmgk").exists());
        assert!(dir_a.path().join("timing.json").exists());
    }

    #[test]
    fn plain_kernel_and_zero_alpha_combined_walk_the_same_path() {
        let mut kernel_cfg = blobs_config(LossVariant::Kernel);
        kernel_cfg.epochs = 4;
        let mut combined_cfg = blobs_config(LossVariant::MixupBoth);
        combined_cfg.epochs = 4;
        combined_cfg.loss = LossSpec {
            variant: LossVariant::MixupBoth,
            alpha: 0.0,
            margin: None,
        };
        combined_cfg.alpha_mix = 0.0;

        let a = train(&kernel_cfg, None).unwrap();
        let b = train(&combined_cfg, None).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.final_accuracy, b.final_accuracy);
    }

    #[test]
    fn exploding_steps_abort_with_a_located_diagnostic() {
        let mut cfg = blobs_config(LossVariant::Contrastive);
        cfg.epochs = 5;
        cfg.learning_rate = 1e200;
        match train(&cfg, None) {
            Err(Error::NonFiniteLoss { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn eval_every_thins_the_accuracy_column() {
        let mut cfg = blobs_config(LossVariant::Kernel);
        cfg.epochs = 5;
        cfg.eval_every = 2;
        let record = train(&cfg, None).unwrap();
        let have: Vec<bool> = record
            .epochs
            .iter()
            .map(|m| m.test_accuracy.is_some())
            .collect();
        // epoch 0 and the final epoch always evaluate; 2 and 4 by cadence
        assert_eq!(have, vec![true, false, true, false, true, true]);
    }

    #[test]
    fn labeled_total_carves_the_exact_count() {
        let mut cfg = blobs_config(LossVariant::Kernel);
        cfg.dataset = DatasetConfig::Blobs {
            classes: 10,
            per_class: 85,
            test_per_class: 5,
            dim: 2,
            spread: 0.04,
        };
        cfg.split_mode = SplitMode::Independent;
        cfg.labeled_total = Some(500);
        let (train_ds, _) = load_datasets(&cfg).unwrap();
        let labeled = labeled_indices(&cfg, &train_ds).unwrap();
        assert_eq!(labeled.len(), 500);
        let sub = train_ds.subset(&labeled).unwrap();
        let counts = sub.class_indices();
        assert!(counts.iter().all(|c| c.len() == 50));
    }

    #[test]
    fn refreshing_centers_keeps_runs_deterministic() {
        let mut cfg = blobs_config(LossVariant::Kernel);
        cfg.epochs = 3;
        cfg.refresh_centers_every = Some(1);
        let a = train(&cfg, None).unwrap();
        let b = train(&cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_agrees_with_a_manual_classification_loop() {
        let cfg = blobs_config(LossVariant::Kernel);
        let (train_ds, test_ds) = load_datasets(&cfg).unwrap();
        let labeled = labeled_indices(&cfg, &train_ds).unwrap();
        let labeled_ds = train_ds.subset(&labeled).unwrap();
        let net = EmbeddingNet::build(cfg.net.clone(), cfg.embed_dim, 4, 1).unwrap();
        let bank = bank_from_embeddings(&cfg, &net, &labeled_ds, None).unwrap();

        let reported = evaluate(&net, Some(&bank), &cfg, &test_ds).unwrap();
        let embeddings = embed_all(&net, &test_ds.inputs, cfg.unit_norm).unwrap();
        let mut correct = 0;
        for i in 0..test_ds.len() {
            if classify(embeddings.row(i).unwrap(), &bank, &cfg.kernel).unwrap()
                == test_ds.labels[i]
            {
                correct += 1;
            }
        }
        assert_eq!(reported, 100.0 * correct as f64 / test_ds.len() as f64);
    }
}
