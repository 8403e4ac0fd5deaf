//! Shift detection on pooled BN1 features: per-stage Gaussian fits,
//! Mahalanobis distances summed over a model's history, and the normalized
//! expansion threshold.

use nalgebra::DMatrix;

use crate::error::{OdexError, Result};
use crate::learner::FeatureVector;

pub const DEFAULT_EPS_SCALE: f64 = 1e-6;
const EPS_FLOOR: f64 = 1e-12;
const DENOM_FLOOR: f64 = 1e-12;
/// Lower bound on ξ (normalized scale).
pub const XI_FLOOR: f64 = 0.1;

/// A per-stage summary that can score how far a feature vector lies from
/// the data it was fitted on.
pub trait StageStatistic {
    fn dim(&self) -> usize;
    fn distance(&self, z: &FeatureVector) -> Result<f64>;
}

/// Gaussian fit of one stage's features with a cached precision matrix.
/// Matrices are row-major `C x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub precision: Vec<f64>,
    pub regularization_eps: f64,
    pub n_samples: usize,
}

impl GaussianStats {
    /// Builds the stats from given moments; the precision is the inverse of
    /// `sigma + eps * I`, computed through a Cholesky factorization.
    pub fn from_moments(mu: Vec<f64>, sigma: Vec<f64>, eps: f64, n_samples: usize) -> Result<Self> {
        let c = mu.len();
        if sigma.len() != c * c {
            return Err(OdexError::DimensionMismatch {
                expected: c * c,
                actual: sigma.len(),
            });
        }
        let mut reg = DMatrix::from_row_slice(c, c, &sigma);
        for i in 0..c {
            reg[(i, i)] += eps;
        }
        let chol = reg.cholesky().ok_or(OdexError::Singular)?;
        let inv = chol.inverse();
        let mut precision = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                // Average with the transpose so the cached matrix is exactly symmetric.
                precision[i * c + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            }
        }
        if precision.iter().any(|v| !v.is_finite()) {
            return Err(OdexError::Singular);
        }
        Ok(Self {
            mu,
            sigma,
            precision,
            regularization_eps: eps,
            n_samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

impl StageStatistic for GaussianStats {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn distance(&self, z: &FeatureVector) -> Result<f64> {
        mahalanobis(self, z)
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(OdexError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Sample mean and divide-by-N covariance, regularized by
/// `eps = eps_scale * trace(sigma) / C` (at least 1e-12).
pub fn fit_gaussian(features: &[FeatureVector], eps_scale: f64) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(OdexError::EmptyInput("need at least 2 feature vectors"));
    }
    let c = features[0].dim();
    if c == 0 {
        return Err(OdexError::EmptyInput("zero-dimensional features"));
    }
    for f in features {
        check_dim(c, f.dim())?;
    }
    let n = features.len() as f64;
    let mut mu = vec![0.0; c];
    for f in features {
        for (m, v) in mu.iter_mut().zip(f.as_slice()) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);

    let mut sigma = vec![0.0; c * c];
    let mut centered = vec![0.0; c];
    for f in features {
        for ((d, v), m) in centered.iter_mut().zip(f.as_slice()).zip(&mu) {
            *d = v - m;
        }
        for i in 0..c {
            for j in i..c {
                sigma[i * c + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = sigma[i * c + j] / n;
            sigma[i * c + j] = v;
            sigma[j * c + i] = v;
        }
    }
    let trace: f64 = (0..c).map(|i| sigma[i * c + i]).sum();
    let eps = (eps_scale * trace / c as f64).max(EPS_FLOOR);
    GaussianStats::from_moments(mu, sigma, eps, features.len())
}

/// `sqrt((z - mu)^T P (z - mu))` with the cached precision `P`.
pub fn mahalanobis(stats: &GaussianStats, z: &FeatureVector) -> Result<f64> {
    let c = stats.dim();
    check_dim(c, z.dim())?;
    let d: Vec<f64> = z.as_slice().iter().zip(&stats.mu).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..c {
        let row = &stats.precision[i * c..(i + 1) * c];
        q += d[i] * row.iter().zip(&d).map(|(p, x)| p * x).sum::<f64>();
    }
    Ok(q.max(0.0).sqrt())
}

/// Ordered per-stage statistics of one model, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct History<S = GaussianStats> {
    pub entries: Vec<S>,
}

impl<S> Default for History<S> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<S> History<S> {
    pub fn new(entries: Vec<S>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: S) {
        self.entries.push(entry);
    }
}

/// Sum of the distances from `z` to every entry of the history.
pub fn summed_history_distance<S: StageStatistic>(history: &History<S>, z: &FeatureVector) -> Result<f64> {
    if history.is_empty() {
        return Err(OdexError::EmptyInput("history"));
    }
    history.entries.iter().map(|e| e.distance(z)).sum()
}

/// Mean of [`summed_history_distance`] over a stage's feature vectors.
pub fn stage_distance<S: StageStatistic>(history: &History<S>, stage_features: &[FeatureVector]) -> Result<f64> {
    if stage_features.is_empty() {
        return Err(OdexError::EmptyInput("stage features"));
    }
    let total: f64 = stage_features
        .iter()
        .map(|z| summed_history_distance(history, z))
        .sum::<Result<f64>>()?;
    Ok(total / stage_features.len() as f64)
}

/// Normalization constants and threshold derived from in-distribution
/// distances. Normalized distance is `(d - d_min) / (2 d_max - d_min)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdCalibration {
    pub d_min: f64,
    pub d_max: f64,
    pub xi: f64,
}

impl ThresholdCalibration {
    fn denominator(&self) -> f64 {
        (2.0 * self.d_max - self.d_min).max(DENOM_FLOOR)
    }

    /// Unclamped normalized value; used for calibration itself.
    fn normalize_raw(&self, d: f64) -> f64 {
        (d - self.d_min) / self.denominator()
    }

    /// `xi` mapped back to the raw distance scale.
    pub fn raw_threshold(&self) -> f64 {
        self.d_min + self.xi * self.denominator()
    }
}

/// `xi = 2 * mean(normalized in-distribution distances)`, floored at
/// [`XI_FLOOR`].
pub fn calibrate_threshold(in_dist_distances: &[f64]) -> Result<ThresholdCalibration> {
    if in_dist_distances.len() < 2 {
        return Err(OdexError::EmptyInput("need at least 2 in-distribution distances"));
    }
    if let Some(&d) = in_dist_distances.iter().find(|d| !(**d >= 0.0)) {
        return Err(OdexError::NegativeDistance(d));
    }
    let d_min = in_dist_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = in_dist_distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cal = ThresholdCalibration { d_min, d_max, xi: 0.0 };
    let mean_norm = in_dist_distances.iter().map(|&d| cal.normalize_raw(d)).sum::<f64>() / in_dist_distances.len() as f64;
    cal.xi = (2.0 * mean_norm).max(XI_FLOOR);
    Ok(cal)
}

/// Normalized distance, clamped below at 0. Values above 1 mean the query
/// lies beyond twice the largest in-distribution distance.
pub fn normalize_distance(cal: &ThresholdCalibration, d: f64) -> f64 {
    cal.normalize_raw(d).max(0.0)
}

/// The unnormalized mean used before flooring, exposed for logging.
pub fn unfloored_xi(in_dist_distances: &[f64]) -> Result<f64> {
    let cal = calibrate_threshold(in_dist_distances)?;
    let mean_norm = in_dist_distances.iter().map(|&d| cal.normalize_raw(d)).sum::<f64>() / in_dist_distances.len() as f64;
    Ok(2.0 * mean_norm)
}
