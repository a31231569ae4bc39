use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};
use crate::model::ModelSpec;

/// Flat model parameters. Entries are always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FlError::domain(format!("non-finite parameter at index {i}")));
        }
        Ok(ParamVector(values))
    }

    pub fn for_spec(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(FlError::shape(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        Self::new(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.len() != spec.param_count() {
            return Err(FlError::shape(format!(
                "parameter vector has {} entries, spec needs {}",
                self.len(),
                spec.param_count()
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sq_distance(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// `self - other`, elementwise.
    pub fn delta(&self, other: &ParamVector) -> Result<ParamVector> {
        if self.len() != other.len() {
            return Err(FlError::shape("parameter vectors differ in length"));
        }
        Ok(ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
        assert!(ParamVector::new(vec![0.0, -2.5]).is_ok());
    }

    #[test]
    fn length_must_match_spec() {
        let spec = ModelSpec::logistic(2, 2).unwrap();
        assert!(ParamVector::for_spec(&spec, vec![0.0; 6]).is_ok());
        assert!(matches!(
            ParamVector::for_spec(&spec, vec![0.0; 5]),
            Err(FlError::Shape(_))
        ));
    }
}
