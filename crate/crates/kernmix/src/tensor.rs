use crate::error::{Error, Result};

/// Dense row-major f64 tensor. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().product::<usize>() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar {
                op: "scalar_value",
                shape: self.shape.clone(),
            })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of the leading axis, for a tensor viewed as [rows, rest].
    pub fn row_len(&self) -> Result<usize> {
        if self.shape.is_empty() {
            return Err(Error::InvalidArgument(
                "scalar has no row axis".to_string(),
            ));
        }
        Ok(self.data.len() / self.shape[0].max(1))
    }

    /// Slice of row `i` along the leading axis.
    pub fn row(&self, i: usize) -> Result<&[f64]> {
        let rows = *self.shape.first().ok_or_else(|| {
            Error::InvalidArgument("scalar has no row axis".to_string())
        })?;
        if i >= rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: i,
                size: rows,
            });
        }
        let stride = self.row_len()?;
        Ok(&self.data[i * stride..(i + 1) * stride])
    }

    /// New tensor holding the given rows of the leading axis, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let stride = self.row_len()?;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(self.row(i)?);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(2.5);
        assert!(t.is_scalar());
        assert_eq!(t.scalar_value().unwrap(), 2.5);
        assert!(Tensor::vector(vec![1.0, 2.0]).scalar_value().is_err());
    }

    #[test]
    fn row_access() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(1).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(t.row(2).is_err());
        let g = t.gather_rows(&[1, 0, 1]).unwrap();
        assert_eq!(g.shape(), &[3, 3]);
        assert_eq!(g.row(2).unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn squared_distance_is_pythagorean() {
        assert_eq!(squared_distance(&[0.0, 0.0], &[3.0, 4.0]), 25.0);
    }
}
