//! CIFAR-10 binary batches: records of one label byte followed by a 32x32
//! image stored channel-major (all red, all green, all blue).

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 1 + 3 * PLANE;
const CLASSES: usize = 10;

/// Loads one or more CIFAR-10 binary batch files into a [n, 32, 32, 3]
/// dataset scaled to [0, 1].
pub fn load_cifar(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no batch files given".to_string()));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (bytes.len() - bytes.len() % RECORD) as u64,
                msg: format!("file size {} is not a multiple of {RECORD}-byte records", bytes.len()),
            });
        }
        for (r, record) in bytes.chunks_exact(RECORD).enumerate() {
            let label = record[0] as usize;
            if label >= CLASSES {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (r * RECORD) as u64,
                    msg: format!("label byte {label} exceeds class {}", CLASSES - 1),
                });
            }
            labels.push(label);
            let planes = &record[1..];
            for pixel in 0..PLANE {
                for channel in 0..3 {
                    data.push(planes[channel * PLANE + pixel] as f64 / 255.0);
                }
            }
        }
    }
    let inputs = Tensor::new(vec![labels.len(), SIDE, SIDE, 3], data)?;
    Dataset::new("cifar10", inputs, labels, CLASSES)
}
