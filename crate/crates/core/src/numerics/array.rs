use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
///
/// Every constructor and arithmetic operation rejects non-finite results, so a
/// value of this type always holds finite data whose length matches its shape.
#[derive(Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = checked_len(&shape)?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?} (expected {expected})",
                data.len(),
                shape
            )));
        }
        ensure_finite(&data, "DenseArray::new")?;
        Ok(Self { shape, data })
    }

    /// One-dimensional array holding `data`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = checked_len(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn dot(&self, other: &DenseArray) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &DenseArray, b: f64) -> Result<DenseArray> {
        self.check_same_shape(other)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        ensure_finite(&data, "lincomb")?;
        Ok(DenseArray {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &DenseArray) -> Result<DenseArray> {
        self.lincomb(1.0, other, -1.0)
    }

    pub fn scale(&self, a: f64) -> Result<DenseArray> {
        let data: Vec<f64> = self.data.iter().map(|x| a * x).collect();
        ensure_finite(&data, "scale")?;
        Ok(DenseArray {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn check_same_shape(&self, other: &DenseArray) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for DenseArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseArray")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "shape must be nonempty with every dimension >= 1, got {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows")))
}

/// Fails with a numeric-domain error naming `what` if any value is NaN or infinite.
pub fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::domain(format!(
            "{what}: non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(DenseArray::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn rejects_zero_dims_and_nan() {
        assert!(DenseArray::zeros(vec![0]).is_err());
        assert!(DenseArray::zeros(vec![]).is_err());
        assert!(DenseArray::from_vec(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn lincomb_and_norms() {
        let a = DenseArray::from_vec(vec![3.0, 0.0]).unwrap();
        let b = DenseArray::from_vec(vec![0.0, 4.0]).unwrap();
        let c = a.lincomb(1.0, &b, 1.0).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 4.0]);
        assert_eq!(c.norm(), 5.0);
        assert_eq!(a.dot(&b).unwrap(), 0.0);
        let wrong = DenseArray::zeros(vec![3]).unwrap();
        assert!(a.sub(&wrong).is_err());
        assert!(a.scale(f64::INFINITY).is_err());
    }
}
