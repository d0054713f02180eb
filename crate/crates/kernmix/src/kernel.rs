//! Weighted Gaussian neighbourhood classifier over a bank of labelled centers.
//!
//! A query x is scored against the k nearest centers; each neighbour z with
//! label i contributes w_z * exp(-||x - z||^2 / (2 sigma^2)) to class i, and
//! the per-class masses are normalized into probabilities. Weights are kept
//! in log space and everything is computed with max-subtraction so that far
//! queries and tiny sigmas cannot underflow to an all-zero score vector.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

/// Additive smoothing applied to class masses before normalization, so that
/// every class keeps a strictly positive probability.
pub const SMOOTHING: f64 = 1e-12;

fn default_sigma() -> f64 {
    5.0
}

fn default_centers_per_class() -> usize {
    10
}

/// Settings of the Gaussian neighbourhood classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Kernel width; must be strictly positive.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Neighbourhood size; `None` means min(bank size, 50).
    #[serde(default)]
    pub k_neighbours: Option<usize>,
    /// Centers drawn per class when initializing a bank.
    #[serde(default = "default_centers_per_class")]
    pub centers_per_class: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            sigma: default_sigma(),
            k_neighbours: None,
            centers_per_class: default_centers_per_class(),
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma must be a positive finite number, got {}",
                self.sigma
            )));
        }
        if self.centers_per_class == 0 {
            return Err(Error::Config(
                "centers_per_class must be at least 1".to_string(),
            ));
        }
        if self.k_neighbours == Some(0) {
            return Err(Error::Config(
                "k_neighbours must be at least 1 when given".to_string(),
            ));
        }
        Ok(())
    }

    /// Neighbourhood size to use against a bank of `n` centers.
    pub fn effective_k(&self, n: usize) -> usize {
        self.k_neighbours.unwrap_or_else(|| n.min(50))
    }
}

/// Labelled centers with per-center log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    centers: Tensor,
    labels: Vec<usize>,
    log_weights: Vec<f64>,
    num_classes: usize,
}

impl CenterBank {
    pub fn new(
        centers: Tensor,
        labels: Vec<usize>,
        log_weights: Vec<f64>,
        num_classes: usize,
    ) -> Result<Self> {
        if centers.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "center_bank",
                lhs: centers.shape().to_vec(),
                rhs: vec![],
            });
        }
        let n = centers.shape()[0];
        if n == 0 {
            return Err(Error::InvalidArgument("bank needs at least one center".to_string()));
        }
        if labels.len() != n || log_weights.len() != n {
            return Err(Error::InvalidArgument(format!(
                "bank size mismatch: {} centers, {} labels, {} weights",
                n,
                labels.len(),
                log_weights.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("bank needs at least one class".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexOutOfRange {
                what: "center label",
                index: bad,
                size: num_classes,
            });
        }
        if !centers.all_finite() || log_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { op: "center_bank" });
        }
        Ok(CenterBank {
            centers,
            labels,
            log_weights,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Replaces the stored log weights, e.g. after a training step.
    pub fn set_log_weights(&mut self, log_weights: Vec<f64>) -> Result<()> {
        if log_weights.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} log weights, got {}",
                self.len(),
                log_weights.len()
            )));
        }
        if log_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { op: "set_log_weights" });
        }
        self.log_weights = log_weights;
        Ok(())
    }

    fn center_row(&self, i: usize) -> &[f64] {
        self.centers.row(i).expect("validated on construction")
    }
}

/// Draws up to `centers_per_class` embeddings per class, without replacement,
/// as the initial center bank. Classes with fewer samples contribute all of
/// them. Weights start at one (zero in log space).
pub fn init_centers(
    embeddings: &Tensor,
    labels: &[usize],
    num_classes: usize,
    centers_per_class: usize,
    seed: u64,
) -> Result<CenterBank> {
    if embeddings.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "init_centers",
            lhs: embeddings.shape().to_vec(),
            rhs: vec![],
        });
    }
    if labels.len() != embeddings.shape()[0] {
        return Err(Error::InvalidArgument(format!(
            "init_centers got {} embeddings but {} labels",
            embeddings.shape()[0],
            labels.len()
        )));
    }
    if num_classes == 0 || centers_per_class == 0 {
        return Err(Error::InvalidArgument(
            "init_centers needs at least one class and one center per class".to_string(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: bad,
            size: num_classes,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    let mut chosen_labels = Vec::new();
    for class in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyClass { class });
        }
        if members.len() > centers_per_class {
            members.shuffle(&mut rng);
            members.truncate(centers_per_class);
            members.sort_unstable();
        }
        for i in members {
            chosen.push(i);
            chosen_labels.push(class);
        }
    }
    let centers = embeddings.gather_rows(&chosen)?;
    let n = chosen.len();
    CenterBank::new(centers, chosen_labels, vec![0.0; n], num_classes)
}

/// Index of the nearest center carrying `label`; ties resolve to the lowest
/// center index.
pub fn assign_phi(x: &[f64], label: usize, bank: &CenterBank) -> Result<usize> {
    if x.len() != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "assign_phi",
            lhs: vec![x.len()],
            rhs: vec![bank.dim()],
        });
    }
    if label >= bank.num_classes() {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: label,
            size: bank.num_classes(),
        });
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, &l) in bank.labels().iter().enumerate() {
        if l != label {
            continue;
        }
        let d = squared_distance(x, bank.center_row(i));
        match best {
            Some((bd, _)) if bd <= d => {}
            _ => best = Some((d, i)),
        }
    }
    best.map(|(_, i)| i).ok_or(Error::EmptyClass { class: label })
}

struct HeapEntry {
    dist: f64,
    idx: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.idx.cmp(&other.idx))
    }
}

/// Indices of the k nearest centers to x, ordered by ascending distance with
/// ties broken by the lower center index. Runs a bounded max-heap selection
/// rather than sorting the whole bank.
pub fn neighbourhood(x: &[f64], bank: &CenterBank, k: usize) -> Result<Vec<usize>> {
    if x.len() != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "neighbourhood",
            lhs: vec![x.len()],
            rhs: vec![bank.dim()],
        });
    }
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "neighbourhood size {} out of range for a bank of {}",
            k,
            bank.len()
        )));
    }
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for idx in 0..bank.len() {
        let dist = squared_distance(x, bank.center_row(idx));
        if heap.len() < k {
            heap.push(HeapEntry { dist, idx });
        } else {
            let entry = HeapEntry { dist, idx };
            if entry < *heap.peek().expect("heap is non-empty") {
                heap.pop();
                heap.push(entry);
            }
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|e| e.idx)
        .collect())
}

/// Class probabilities of x over a fixed neighbour set, built on the tape.
///
/// `x` is a length-d node; `log_weights` is a length-n node whose values are
/// the authority on weights (the bank supplies geometry and labels only).
/// Scores use max-subtraction, and the detached maximum cancels in the final
/// ratio, so gradients are exact.
pub fn class_probabilities_with_neighbours_node(
    tape: &mut Tape,
    x: NodeId,
    log_weights: NodeId,
    bank: &CenterBank,
    sigma: f64,
    neighbours: &[usize],
) -> Result<NodeId> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if neighbours.is_empty() {
        return Err(Error::InvalidArgument("empty neighbour set".to_string()));
    }
    if tape.data(log_weights).len() != bank.len() {
        return Err(Error::ShapeMismatch {
            op: "class_probabilities",
            lhs: tape.shape(log_weights).to_vec(),
            rhs: vec![bank.len()],
        });
    }
    let k = neighbours.len();
    let c = bank.num_classes();

    let gathered = Arc::new(bank.centers().gather_rows(neighbours)?);
    let dists = tape.dists_to_rows(x, gathered)?;
    let lw = tape.gather(log_weights, neighbours)?;
    let scaled = tape.mul_scalar(dists, -1.0 / (2.0 * sigma * sigma))?;
    let scores = tape.add(lw, scaled)?;

    let max_score = tape
        .data(scores)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(scores, -max_score)?;
    let resp = tape.exp(shifted)?;

    let mut indicator = vec![0.0; c * k];
    for (j, &z) in neighbours.iter().enumerate() {
        indicator[bank.labels()[z] * k + j] = 1.0;
    }
    let ind = tape.constant(Tensor::matrix(c, k, indicator)?);
    let col = tape.reshape(resp, vec![k, 1])?;
    let stacked = tape.matmul(ind, col)?;
    let masses = tape.reshape(stacked, vec![c])?;

    let num = tape.add_scalar(masses, SMOOTHING)?;
    let total = tape.sum(masses)?;
    let den = tape.add_scalar(total, c as f64 * SMOOTHING)?;
    tape.div_scalar_node(num, den)
}

/// Class probabilities of x on the tape, with the neighbour set taken from
/// the current values of `x`.
pub fn class_probabilities_node(
    tape: &mut Tape,
    x: NodeId,
    log_weights: NodeId,
    bank: &CenterBank,
    cfg: &KernelConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let xv = tape.data(x).to_vec();
    let nbs = neighbourhood(&xv, bank, cfg.effective_k(bank.len()))?;
    class_probabilities_with_neighbours_node(tape, x, log_weights, bank, cfg.sigma, &nbs)
}

/// Plain-value class probabilities; sums to one within 1e-9.
pub fn class_probabilities(x: &[f64], bank: &CenterBank, cfg: &KernelConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(Tensor::vector(x.to_vec()), false);
    let lw = tape.leaf(Tensor::vector(bank.log_weights().to_vec()), false);
    let probs = class_probabilities_node(&mut tape, xid, lw, bank, cfg)?;
    Ok(tape.data(probs).to_vec())
}

/// Most probable class for x; ties resolve to the lowest class index.
pub fn classify(x: &[f64], bank: &CenterBank, cfg: &KernelConfig) -> Result<usize> {
    let probs = class_probabilities(x, bank, cfg)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Negative log probability of the true class under the classifier, over a
/// fixed neighbour set.
pub fn kernel_loss_with_neighbours_node(
    tape: &mut Tape,
    x: NodeId,
    log_weights: NodeId,
    label: usize,
    bank: &CenterBank,
    sigma: f64,
    neighbours: &[usize],
) -> Result<NodeId> {
    if label >= bank.num_classes() {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: label,
            size: bank.num_classes(),
        });
    }
    let probs =
        class_probabilities_with_neighbours_node(tape, x, log_weights, bank, sigma, neighbours)?;
    let p = tape.index(probs, label)?;
    let lp = tape.ln(p)?;
    tape.neg(lp)
}

/// Negative log probability of the true class, neighbours from current values.
pub fn kernel_loss_node(
    tape: &mut Tape,
    x: NodeId,
    log_weights: NodeId,
    label: usize,
    bank: &CenterBank,
    cfg: &KernelConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let xv = tape.data(x).to_vec();
    let nbs = neighbourhood(&xv, bank, cfg.effective_k(bank.len()))?;
    kernel_loss_with_neighbours_node(tape, x, log_weights, label, bank, cfg.sigma, &nbs)
}

/// Plain-value classifier loss for one query.
pub fn kernel_loss(x: &[f64], label: usize, bank: &CenterBank, cfg: &KernelConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let xid = tape.leaf(Tensor::vector(x.to_vec()), false);
    let lw = tape.leaf(Tensor::vector(bank.log_weights().to_vec()), false);
    let loss = kernel_loss_node(&mut tape, xid, lw, label, bank, cfg)?;
    tape.scalar_value(loss)
}

/// Mean classifier loss over the rows of an embedding matrix node, with one
/// frozen neighbour set per row.
pub fn kernel_batch_with_neighbours_node(
    tape: &mut Tape,
    embeddings: NodeId,
    labels: &[usize],
    log_weights: NodeId,
    bank: &CenterBank,
    sigma: f64,
    neighbours: &[Vec<usize>],
) -> Result<NodeId> {
    let b = *tape
        .shape(embeddings)
        .first()
        .ok_or(Error::InvalidArgument("embeddings must be a matrix".to_string()))?;
    if labels.len() != b || neighbours.len() != b {
        return Err(Error::InvalidArgument(format!(
            "batch size mismatch: {} embeddings, {} labels, {} neighbour sets",
            b,
            labels.len(),
            neighbours.len()
        )));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".to_string()));
    }
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let xi = tape.row(embeddings, i)?;
        terms.push(kernel_loss_with_neighbours_node(
            tape,
            xi,
            log_weights,
            labels[i],
            bank,
            sigma,
            &neighbours[i],
        )?);
    }
    let total = tape.sum_many(&terms)?;
    tape.mul_scalar(total, 1.0 / b as f64)
}

/// Mean classifier loss over the rows of an embedding matrix node.
pub fn kernel_batch_node(
    tape: &mut Tape,
    embeddings: NodeId,
    labels: &[usize],
    log_weights: NodeId,
    bank: &CenterBank,
    cfg: &KernelConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let b = *tape
        .shape(embeddings)
        .first()
        .ok_or(Error::InvalidArgument("embeddings must be a matrix".to_string()))?;
    let k = cfg.effective_k(bank.len());
    let mut nbs = Vec::with_capacity(b);
    for i in 0..b {
        let start = i * bank.dim();
        let row = &tape.data(embeddings)[start..start + bank.dim()];
        nbs.push(neighbourhood(row, bank, k)?);
    }
    kernel_batch_with_neighbours_node(tape, embeddings, labels, log_weights, bank, cfg.sigma, &nbs)
}

const BANK_MAGIC: &[u8; 4] = b"KMGK";
const BANK_VERSION: u32 = 1;

/// Serialized as magic, version, (n, d, c) and the raw center / label /
/// log-weight arrays, all little-endian, plus a JSON sidecar `<path>.json`
/// holding the kernel settings.
pub fn save_bank(path: &Path, bank: &CenterBank, cfg: &KernelConfig) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::with_capacity(16 + bank.len() * (bank.dim() + 2) * 8);
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.num_classes() as u32).to_le_bytes());
    for v in bank.centers().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in bank.labels() {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for w in bank.log_weights() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;

    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("could not encode kernel settings: {e}")))?;
    fs::write(&sidecar, json).map_err(|source| Error::Io {
        path: sidecar.clone(),
        source,
    })?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

pub fn load_bank(path: &Path) -> Result<(CenterBank, KernelConfig)> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fmt = |offset: u64, msg: &str| Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 20 {
        return Err(fmt(bytes.len() as u64, "file too short for a bank header"));
    }
    if &bytes[0..4] != BANK_MAGIC {
        return Err(fmt(0, "bad magic, expected KMGK"));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = read_u32(4);
    if version != BANK_VERSION {
        return Err(fmt(4, &format!("unsupported version {version}")));
    }
    let n = read_u32(8) as usize;
    let d = read_u32(12) as usize;
    let c = read_u32(16) as usize;
    let expected = 20 + n * d * 8 + n * 4 + n * 8;
    if bytes.len() != expected {
        return Err(fmt(
            bytes.len().min(expected) as u64,
            &format!("expected {expected} bytes for n={n} d={d}, found {}", bytes.len()),
        ));
    }
    let mut at = 20;
    let mut centers = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        centers.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
        at += 8;
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(at) as usize);
        at += 4;
    }
    let mut log_weights = Vec::with_capacity(n);
    for _ in 0..n {
        log_weights.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
        at += 8;
    }
    let bank = CenterBank::new(Tensor::matrix(n, d, centers)?, labels, log_weights, c)?;

    let sidecar = sidecar_path(path);
    let mut cfg_json = String::new();
    fs::File::open(&sidecar)
        .and_then(|mut f| f.read_to_string(&mut cfg_json))
        .map_err(|source| Error::Io {
            path: sidecar.clone(),
            source,
        })?;
    let cfg: KernelConfig = serde_json::from_str(&cfg_json).map_err(|e| Error::Format {
        path: sidecar,
        offset: 0,
        msg: format!("bad kernel settings: {e}"),
    })?;
    cfg.validate()?;
    Ok((bank, cfg))
}
