use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::{dot, l2_norm};

/// A unit-norm vector in the shared image-text space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v` to unit length. Zero or non-finite vectors are rejected.
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("embedding has non-finite entries"));
        }
        let n = l2_norm(&v);
        if n == 0.0 {
            return Err(invalid("cannot normalize a zero vector"));
        }
        Ok(Embedding(v.into_iter().map(|x| x / n).collect()))
    }

    /// Wraps a vector already known to be unit-norm (checked within 1e-6).
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&v);
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("expected a unit vector, norm is {n}")));
        }
        Ok(Embedding(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Cosine similarity; equal to the dot product for unit vectors.
    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(shape(format!(
                "dimension {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(dot(&self.0, &other.0))
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}
