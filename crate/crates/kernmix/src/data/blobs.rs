//! Synthetic Gaussian blobs: class centers spaced around a circle inside
//! the unit box, isotropic noise on top. A desk-scale stand-in for image
//! datasets that keeps the same [`Dataset`] contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RADIUS: f64 = 0.35;
const CENTER: f64 = 0.5;

/// The noiseless center of one class.
pub fn blob_center(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    let angle = std::f64::consts::TAU * class as f64 / classes as f64;
    let mut center = vec![CENTER; dim];
    center[0] = CENTER + RADIUS * angle.cos();
    if dim > 1 {
        center[1] = CENTER + RADIUS * angle.sin();
    }
    center
}

/// Generates `classes * per_class` points in class-major order, with class
/// centers on a circle in the first two dimensions and Gaussian noise of
/// standard deviation `spread`. Deterministic per seed.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {classes}")));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::Config("blobs need per_class >= 1 and dim >= 1".to_string()));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Config(format!("spread must be positive and finite, got {spread}")));
    }

    let noise = Normal::new(0.0, spread)
        .map_err(|e| Error::Config(format!("bad noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let center = blob_center(class, classes, dim);
        for _ in 0..per_class {
            labels.push(class);
            for &c in &center {
                data.push(c + noise.sample(&mut rng));
            }
        }
    }
    let inputs = Tensor::matrix(n, dim, data)?;
    Dataset::new(format!("blobs{classes}x{per_class}"), inputs, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::squared_distance;

    #[test]
    fn counts_come_out_class_major() {
        let ds = make_blobs(4, 100, 3, 0.05, 0).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.inputs.shape(), &[400, 3]);
        for class in 0..4 {
            assert!(ds.labels[class * 100..(class + 1) * 100]
                .iter()
                .all(|&l| l == class));
        }
    }

    #[test]
    fn vanishing_spread_collapses_onto_the_centers() {
        let ds = make_blobs(3, 5, 4, 1e-12, 1).unwrap();
        for (i, &label) in ds.labels.iter().enumerate() {
            let center = blob_center(label, 3, 4);
            let d2 = squared_distance(ds.inputs.row(i).unwrap(), &center);
            assert!(d2.sqrt() < 1e-9);
        }
    }

    #[test]
    fn centers_are_distinct_and_inside_the_box() {
        for classes in [2, 5, 10] {
            for a in 0..classes {
                let ca = blob_center(a, classes, 2);
                assert!(ca.iter().all(|&v| (0.0..=1.0).contains(&v)));
                for b in 0..a {
                    let cb = blob_center(b, classes, 2);
                    assert!(squared_distance(&ca, &cb) > 1e-3);
                }
            }
        }
    }

    #[test]
    fn seeding_pins_the_draw() {
        let a = make_blobs(3, 10, 2, 0.1, 42).unwrap();
        let b = make_blobs(3, 10, 2, 0.1, 42).unwrap();
        let c = make_blobs(3, 10, 2, 0.1, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_arguments_are_rejected() {
        assert!(make_blobs(1, 10, 2, 0.1, 0).is_err());
        assert!(make_blobs(3, 10, 2, 0.0, 0).is_err());
        assert!(make_blobs(3, 0, 2, 0.1, 0).is_err());
    }
}
