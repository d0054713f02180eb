//! Run configuration: one TOML file describes the dataset, the loss, the
//! kernel classifier, the backbone, and the optimizer schedule. Configs
//! round-trip losslessly and hash stably, so a (config, seed) pair pins a
//! run completely.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::split::SplitMode;
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::losses::LossSpec;
use crate::net::NetSpec;

/// Where the training and test sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Synthetic Gaussian blobs, drawn fresh per run seed.
    Blobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
    },
    /// The IDX digit files under `<dir>/mnist/`; `dir` falls back to the
    /// KERNMIX_DATA_DIR environment variable, then `./data`.
    Mnist {
        #[serde(default)]
        dir: Option<String>,
    },
    /// Arbitrary IDX image/label pairs.
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
    /// CIFAR-10 binary batches.
    Cifar {
        train_batches: Vec<String>,
        test_batches: Vec<String>,
    },
}

fn default_embed_dim() -> usize {
    32
}

fn default_batch_size() -> usize {
    32
}

fn default_epochs() -> usize {
    200
}

fn default_learning_rate() -> f64 {
    0.05
}

fn default_momentum() -> f64 {
    0.9
}

fn default_lr_decay_factor() -> f64 {
    0.1
}

fn default_alpha_mix() -> f64 {
    1.0
}

fn default_labeled_fraction() -> f64 {
    0.10
}

fn default_split_mode() -> SplitMode {
    SplitMode::Folds
}

fn default_eval_every() -> usize {
    1
}

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub loss: LossSpec,
    #[serde(default)]
    pub kernel: KernelConfig,
    pub net: NetSpec,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_decay_factor` entering this epoch.
    #[serde(default)]
    pub lr_decay_epoch: Option<usize>,
    #[serde(default = "default_lr_decay_factor")]
    pub lr_decay_factor: f64,
    /// Beta(a, a) parameter for the mixing coefficient; 0 disables mixing.
    #[serde(default = "default_alpha_mix")]
    pub alpha_mix: f64,
    /// Redraw mixing partners that share the anchor's label.
    #[serde(default)]
    pub avoid_same_label_mixing: bool,
    /// Fraction of the training set that keeps its labels.
    #[serde(default = "default_labeled_fraction")]
    pub labeled_fraction: f64,
    /// When set, overrides `labeled_fraction` with `labeled_total / n_train`.
    #[serde(default)]
    pub labeled_total: Option<usize>,
    #[serde(default = "default_split_mode")]
    pub split_mode: SplitMode,
    #[serde(default)]
    pub fold_index: usize,
    /// Evaluate every this many epochs (the final epoch always evaluates).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Scale embeddings to unit length before any distance computation.
    #[serde(default)]
    pub unit_norm: bool,
    /// Re-embed the kernel centers with the current network every this many
    /// epochs; unset keeps the initial centers throughout.
    #[serde(default)]
    pub refresh_centers_every: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.kernel.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".to_string()));
        }
        if self.refresh_centers_every == Some(0) {
            return Err(Error::Config(
                "refresh_centers_every must be at least 1 when given".to_string(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_decay_factor > 0.0) || !self.lr_decay_factor.is_finite() {
            return Err(Error::Config(format!(
                "lr_decay_factor must be positive and finite, got {}",
                self.lr_decay_factor
            )));
        }
        if !(self.alpha_mix >= 0.0) || !self.alpha_mix.is_finite() {
            return Err(Error::Config(format!(
                "alpha_mix must be non-negative and finite, got {}",
                self.alpha_mix
            )));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if self.labeled_total == Some(0) {
            return Err(Error::Config(
                "labeled_total must be at least 1 when given".to_string(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".to_string()));
        }
        Ok(())
    }

    /// The labeled fraction actually in force for a training set of `n`.
    pub fn effective_fraction(&self, n: usize) -> Result<f64> {
        let fraction = match self.labeled_total {
            Some(total) => {
                if total > n {
                    return Err(Error::Config(format!(
                        "labeled_total {total} exceeds the training set of {n}"
                    )));
                }
                total as f64 / n as f64
            }
            None => self.labeled_fraction,
        };
        Ok(fraction)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("could not encode config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// SHA-256 of the canonical JSON form; field order is fixed by the
    /// struct, so equal configs hash equally.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::losses::{LossSpec, LossVariant};
    use crate::net::NetSpec;

    /// A small, fast blobs run shared across harness tests.
    pub(crate) fn blobs_config(variant: LossVariant) -> TrainConfig {
        TrainConfig {
            dataset: DatasetConfig::Blobs {
                classes: 4,
                per_class: 24,
                test_per_class: 10,
                dim: 2,
                spread: 0.04,
            },
            loss: LossSpec::new(variant),
            kernel: KernelConfig {
                sigma: 1.0,
                k_neighbours: None,
                centers_per_class: 5,
            },
            net: NetSpec::MlpSmall { in_dim: 2 },
            embed_dim: 8,
            batch_size: 16,
            epochs: 5,
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
            eval_every: 1,
            unit_norm: false,
            refresh_centers_every: None,
            seed: 7,
        }
    }
}
