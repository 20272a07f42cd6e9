use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat real vector holding model weights or gradients.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "parameter vectors have dimensions {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        debug_assert_eq!(self.dim(), x.dim());
        for (a, b) in self.0.iter_mut().zip(&x.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|a| *a *= alpha);
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Arithmetic mean of equally sized vectors.
    pub fn mean<'a, I>(vectors: I, dim: usize) -> ParamVector
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut acc = ParamVector::zeros(dim);
        let mut count = 0usize;
        for v in vectors {
            acc.axpy(1.0, v);
            count += 1;
        }
        if count > 0 {
            acc.scale(1.0 / count as f64);
        }
        acc
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}
