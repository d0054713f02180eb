//! Stratified labeled/unlabeled splits and fold plans for the reduced
//! supervision protocol: train on a small labeled slice, leave the rest
//! untouched.
//!
//! Folds are disjoint stratified partitions by default; an independent-draw
//! mode repeats a stratified subsample with per-fold seeds instead, in which
//! case folds may overlap.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// How a plan's folds were drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Disjoint stratified partition; folds cover the dataset exactly once.
    Folds,
    /// Repeated stratified subsamples with per-fold seeds; may overlap.
    Independent,
}

/// A reproducible set of labeled index lists, one per fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub labeled_fraction: f64,
    pub fold_count: usize,
    pub seed: u64,
    pub mode: SplitMode,
    pub folds: Vec<Vec<usize>>,
}

impl SplitPlan {
    pub fn fold(&self, index: usize) -> Result<&[usize]> {
        self.folds
            .get(index)
            .map(|f| f.as_slice())
            .ok_or(Error::IndexOutOfRange {
                what: "fold",
                index,
                size: self.folds.len(),
            })
    }

    /// Every index below `n` that the given fold leaves unlabeled.
    pub fn complement(&self, index: usize, n: usize) -> Result<Vec<usize>> {
        let fold = self.fold(index)?;
        let mut in_fold = vec![false; n];
        for &i in fold {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "fold entry",
                    index: i,
                    size: n,
                });
            }
            in_fold[i] = true;
        }
        Ok((0..n).filter(|&i| !in_fold[i]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Config(format!("could not encode split plan: {e}")))?;
        fs::write(path, json).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<SplitPlan> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.column() as u64,
            msg: format!("bad split plan: {e}"),
        })
    }
}

/// Picks `round(fraction * class_size)` indices per class (round half up),
/// without replacement. Returns the labeled indices and the untouched pool,
/// both ascending. Fails for any class the rounding would leave empty.
pub fn stratified_subsample(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    let mut pool = Vec::new();
    for (class, mut indices) in dataset.class_indices().into_iter().enumerate() {
        let take = (fraction * indices.len() as f64 + 0.5).floor() as usize;
        if take == 0 {
            return Err(Error::EmptyClass { class });
        }
        indices.shuffle(&mut rng);
        labeled.extend_from_slice(&indices[..take]);
        pool.extend_from_slice(&indices[take..]);
    }
    labeled.sort_unstable();
    pool.sort_unstable();
    Ok((labeled, pool))
}

/// Deals each class round-robin into `fold_count` disjoint stratified folds
/// after a seeded shuffle. Every index lands in exactly one fold.
pub fn folds(dataset: &Dataset, fold_count: usize, seed: u64) -> Result<SplitPlan> {
    if fold_count == 0 {
        return Err(Error::Config("fold count must be at least 1".to_string()));
    }
    let by_class = dataset.class_indices();
    for (class, indices) in by_class.iter().enumerate() {
        if indices.len() < fold_count {
            return Err(Error::Config(format!(
                "cannot deal class {class} of {} items into {fold_count} folds",
                indices.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_lists = vec![Vec::new(); fold_count];
    for mut indices in by_class {
        indices.shuffle(&mut rng);
        for (i, idx) in indices.into_iter().enumerate() {
            fold_lists[i % fold_count].push(idx);
        }
    }
    for fold in &mut fold_lists {
        fold.sort_unstable();
    }
    Ok(SplitPlan {
        labeled_fraction: 1.0 / fold_count as f64,
        fold_count,
        seed,
        mode: SplitMode::Folds,
        folds: fold_lists,
    })
}

/// Draws `fold_count` independent stratified subsamples of the given
/// fraction, each from its own derived seed.
pub fn independent_draws(
    dataset: &Dataset,
    fold_count: usize,
    fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if fold_count == 0 {
        return Err(Error::Config("fold count must be at least 1".to_string()));
    }
    let fold_lists = (0..fold_count)
        .map(|f| stratified_subsample(dataset, fraction, draw_seed(seed, f)).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitPlan {
        labeled_fraction: fraction,
        fold_count,
        seed,
        mode: SplitMode::Independent,
        folds: fold_lists,
    })
}

fn draw_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1))
}
