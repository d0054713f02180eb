//! Datasets and the reduced-supervision split protocol.
//!
//! A [`Dataset`] couples an input tensor (images as [n, h, w, channels] in
//! [0, 1], or flat [n, d] feature rows) with class labels. Loaders cover the
//! IDX image format, the CIFAR-10 binary format, and synthetic Gaussian
//! blobs; [`split`] carves out stratified labeled subsets and folds.

pub mod blobs;
pub mod cifar;
pub mod idx;
pub mod split;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An immutable labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// [n, ...] inputs; the leading axis indexes items.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    /// Validates that labels and inputs agree: one label per item, every
    /// label within range, and every class represented at least once.
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = *inputs.shape().first().ok_or_else(|| {
            Error::InvalidArgument("dataset inputs need a leading item axis".to_string())
        })?;
        if n == 0 {
            return Err(Error::InvalidArgument("dataset is empty".to_string()));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one class".to_string()));
        }
        let mut seen = vec![false; num_classes];
        for &label in &labels {
            if label >= num_classes {
                return Err(Error::IndexOutOfRange {
                    what: "label",
                    index: label,
                    size: num_classes,
                });
            }
            seen[label] = true;
        }
        if let Some(class) = seen.iter().position(|&s| !s) {
            return Err(Error::EmptyClass { class });
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Values per item, however the item axis is shaped.
    pub fn item_numel(&self) -> usize {
        self.inputs.numel() / self.len()
    }

    /// Item indices grouped by class, each list ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &label) in self.labels.iter().enumerate() {
            by_class[label].push(i);
        }
        by_class
    }

    /// The items at the given indices, as a dataset of their own. Fails if
    /// the selection drops a class entirely.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.name.clone(), inputs, labels, self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let inputs = Tensor::matrix(4, 2, vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1, 3.0, 3.1]).unwrap();
        Dataset::new("toy", inputs, vec![0, 1, 0, 1], 2).unwrap()
    }

    #[test]
    fn validation_rejects_bad_labels_and_missing_classes() {
        let inputs = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            Dataset::new("t", inputs.clone(), vec![0, 2], 2),
            Err(Error::IndexOutOfRange { what: "label", .. })
        ));
        assert!(matches!(
            Dataset::new("t", inputs.clone(), vec![0, 0], 2),
            Err(Error::EmptyClass { class: 1 })
        ));
        assert!(Dataset::new("t", inputs, vec![0, 1, 0], 2).is_err());
    }

    #[test]
    fn subset_gathers_rows_and_labels_together() {
        let ds = toy();
        let sub = ds.subset(&[2, 1]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.inputs.row(0).unwrap(), &[2.0, 2.1]);
        assert_eq!(sub.labels, vec![0, 1]);
    }

    #[test]
    fn subset_that_loses_a_class_is_rejected() {
        let ds = toy();
        assert!(matches!(
            ds.subset(&[0, 2]),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn class_indices_partition_the_items() {
        let ds = toy();
        assert_eq!(ds.class_indices(), vec![vec![0, 2], vec![1, 3]]);
    }
}
