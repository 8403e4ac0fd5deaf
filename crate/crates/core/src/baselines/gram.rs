//! Gram-matrix shift statistic used by the GRAM ablation.

use crate::error::{OdexError, Result};
use crate::learner::FeatureVector;
use crate::oodgate::StageStatistic;

/// Mean outer product `(1/N) Σ z zᵀ` of a stage's features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub gram: Vec<f64>,
    pub n_samples: usize,
}

impl GramMatrix {
    pub fn dim(&self) -> usize {
        (self.gram.len() as f64).sqrt().round() as usize
    }

    /// Frobenius norm of `z zᵀ - G`.
    pub fn frobenius_to_outer(&self, z: &[f64]) -> Result<f64> {
        let c = self.dim();
        if z.len() != c {
            return Err(OdexError::DimensionMismatch {
                expected: c,
                actual: z.len(),
            });
        }
        let mut acc = 0.0;
        for i in 0..c {
            for j in 0..c {
                let d = z[i] * z[j] - self.gram[i * c + j];
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }

    /// Frobenius norm of the difference of two Gram matrices.
    pub fn frobenius(&self, other: &GramMatrix) -> Result<f64> {
        if self.gram.len() != other.gram.len() {
            return Err(OdexError::DimensionMismatch {
                expected: self.gram.len(),
                actual: other.gram.len(),
            });
        }
        Ok(self
            .gram
            .iter()
            .zip(&other.gram)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

impl StageStatistic for GramMatrix {
    fn dim(&self) -> usize {
        GramMatrix::dim(self)
    }

    fn distance(&self, z: &FeatureVector) -> Result<f64> {
        self.frobenius_to_outer(&z.0)
    }
}

pub fn fit_gram(features: &[FeatureVector]) -> Result<GramMatrix> {
    let first = features.first().ok_or(OdexError::EmptyInput("features"))?;
    let c = first.dim();
    let mut gram = vec![0.0; c * c];
    for z in features {
        if z.dim() != c {
            return Err(OdexError::DimensionMismatch {
                expected: c,
                actual: z.dim(),
            });
        }
        for i in 0..c {
            for j in 0..c {
                gram[i * c + j] += z.0[i] * z.0[j];
            }
        }
    }
    let n = features.len() as f64;
    gram.iter_mut().for_each(|g| *g /= n);
    Ok(GramMatrix {
        gram,
        n_samples: features.len(),
    })
}
