//! Unit-normalized embeddings and the distances used to compare them.
//!
//! Every encoder in this crate normalizes at its boundary, so all distances
//! below assume unit vectors: cosine distance lies in `[0, 2]`, Euclidean
//! distance in `[0, 2]`, and `euclidean² = 2 · cosine_distance`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm tolerance for the unit-length invariant.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A unit vector in some model's joint embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    space_id: String,
}

impl Embedding {
    /// Wraps an already unit-length vector. Fails if the norm is off by more
    /// than [`UNIT_NORM_TOL`].
    pub fn new(values: Vec<f64>, space_id: impl Into<String>) -> Result<Self> {
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { norm });
        }
        Ok(Self {
            values,
            space_id: space_id.into(),
        })
    }

    /// Normalizes `values` to unit length. A zero (or non-finite) vector has
    /// no direction and is rejected.
    pub fn normalized(mut values: Vec<f64>, space_id: impl Into<String>) -> Result<Self> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NotNormalized { norm });
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            values,
            space_id: space_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn space_id(&self) -> &str {
        &self.space_id
    }

    /// Re-tags the embedding as living in another space. Verification uses
    /// this to feed a suspicious model's outputs through the owner's module.
    pub fn assume_space(mut self, space_id: impl Into<String>) -> Self {
        self.space_id = space_id.into();
        self
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self, other)?;
        Ok(dot(&self.values, &other.values))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(u: &Embedding, v: &Embedding) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    Ok(())
}

/// `1 − cos(u, v)`, clamped into `[0, 2]` against rounding.
pub fn cosine_distance(u: &Embedding, v: &Embedding) -> Result<f64> {
    Ok((1.0 - u.dot(v)?).clamp(0.0, 2.0))
}

/// `‖u − v‖₂`.
pub fn euclidean_distance(u: &Embedding, v: &Embedding) -> Result<f64> {
    check_dims(u, v)?;
    Ok(u.values
        .iter()
        .zip(&v.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Cosine similarity on the 0–100 scale used by the report tables.
pub fn similarity_score(u: &Embedding, v: &Embedding) -> Result<f64> {
    Ok(100.0 * u.dot(v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec(), "t").unwrap()
    }

    #[test]
    fn closed_form_cases() {
        let u = e(&[1.0, 0.0, 0.0]);
        let w = e(&[0.0, 1.0, 0.0]);
        let neg = e(&[-1.0, 0.0, 0.0]);

        assert_eq!(cosine_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(cosine_distance(&u, &w).unwrap(), 1.0);
        assert_eq!(cosine_distance(&u, &neg).unwrap(), 2.0);

        assert_eq!(euclidean_distance(&u, &u).unwrap(), 0.0);
        assert!((euclidean_distance(&u, &w).unwrap() - 1.414_213_56).abs() < 1e-8);
        assert_eq!(euclidean_distance(&u, &neg).unwrap(), 2.0);

        assert_eq!(similarity_score(&u, &u).unwrap(), 100.0);
        assert_eq!(similarity_score(&u, &w).unwrap(), 0.0);
        let sixty = e(&[0.5, 3f64.sqrt() / 2.0, 0.0]);
        assert!((similarity_score(&u, &sixty).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let u = e(&[1.0, 0.0]);
        let v = e(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine_distance(&u, &v),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(euclidean_distance(&u, &v).is_err());
        assert!(similarity_score(&u, &v).is_err());
    }

    #[test]
    fn constructor_rejects_non_unit_and_zero() {
        assert!(Embedding::new(vec![2.0, 0.0], "t").is_err());
        assert!(Embedding::normalized(vec![0.0, 0.0], "t").is_err());
        assert!(Embedding::new(vec![0.6, 0.8], "t").is_ok());
    }

    fn unit_vec(dim: usize) -> impl Strategy<Value = Embedding> {
        proptest::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("non-zero", |v| l2_norm(v) > 1e-3)
            .prop_map(|v| Embedding::normalized(v, "p").unwrap())
    }

    proptest! {
        #[test]
        fn distance_identities((u, v) in (unit_vec(8), unit_vec(8))) {
            let cd = cosine_distance(&u, &v).unwrap();
            let ed = euclidean_distance(&u, &v).unwrap();
            prop_assert!((ed * ed - 2.0 * cd).abs() < 1e-9);
            let s = similarity_score(&u, &v).unwrap();
            prop_assert!((s - 100.0 * (1.0 - cd)).abs() < 1e-9);
            prop_assert_eq!(cd, cosine_distance(&v, &u).unwrap());
            prop_assert!((0.0..=2.0).contains(&cd));
        }
    }
}
