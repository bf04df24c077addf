//! Small dense linear algebra and probability primitives.
//!
//! Everything here works on `nalgebra` dynamic vectors and matrices. State
//! dimensions in this crate are tiny (2 or 3), so no attempt is made at
//! blocking or in-place factorizations.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// `n × N` matrix whose columns are ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble(DMatrix<f64>);

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Self {
        Ensemble(members)
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Self {
        Ensemble(DMatrix::from_columns(columns))
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Ensemble size `N`.
    pub fn size(&self) -> usize {
        self.0.ncols()
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.0.column(i).into_owned()
    }

    pub fn members(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.0.column_iter().map(|c| c.into_owned())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn mean(&self) -> DVector<f64> {
        self.0.column_mean()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Column mean and unbiased sample covariance `A Aᵀ / (N - 1)` of the anomalies.
pub fn ensemble_mean_cov(ens: &Ensemble) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let count = ens.size();
    if count < 2 {
        return Err(Error::InsufficientEnsemble { got: count, need: 2 });
    }
    let mean = ens.mean();
    let mut anomalies = ens.matrix().clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = &anomalies * anomalies.transpose() / (count as f64 - 1.0);
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Silverman bandwidth `β²_N = s_β (4 / (N (n + 2)))^(2 / (n + 4))`.
pub fn silverman_bandwidth(count: usize, dim: usize, s_beta: f64) -> f64 {
    assert!(count >= 1 && dim >= 1, "silverman bandwidth needs N >= 1 and n >= 1");
    assert!(s_beta > 0.0, "bandwidth scale must be positive");
    let n = dim as f64;
    s_beta * (4.0 / (count as f64 * (n + 2.0))).powf(2.0 / (n + 4.0))
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn try_cholesky(cov: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut a = cov.clone();
    if jitter > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
    }
    Cholesky::new(a).map(|c| c.l())
}

/// Lower-triangular `L` with `L Lᵀ = cov + jitter I`.
///
/// When the requested jitter is not enough, extra diagonal loading is tried
/// starting at `1e-12 · tr(cov) / n` and growing tenfold up to
/// `1e-6 · tr(cov) / n`. An all-zero covariance factors to the zero matrix.
pub fn cholesky_factor(cov: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: cov.ncols() });
    }
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    if let Some(l) = try_cholesky(cov, jitter) {
        return Ok(l);
    }
    if jitter == 0.0 && cov.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let scale = cov.trace() / n as f64;
    if !(scale > 0.0) {
        return Err(Error::SingularCovariance);
    }
    let mut extra = 1e-12 * scale;
    while extra <= 1e-6 * scale * (1.0 + 1e-9) {
        if let Some(l) = try_cholesky(cov, jitter + extra) {
            log::debug!("cholesky needed extra jitter {extra:e}");
            return Ok(l);
        }
        extra *= 10.0;
    }
    Err(Error::SingularCovariance)
}

/// `mean + chol · z` with `z` standard normal.
pub fn gaussian_sample(rng: &mut RngStream, mean: &DVector<f64>, chol: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.standard_normal());
    let mut x = mean.clone();
    // chol is lower triangular
    for i in 0..mean.len() {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += chol[(i, j)] * z[j];
        }
        x[i] += acc;
    }
    x
}

/// Multivariate normal log-density from a Cholesky factor of the covariance.
pub fn log_gaussian_density_chol(x: &DVector<f64>, mean: &DVector<f64>, chol: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let diff = x - mean;
    let z = chol
        .solve_lower_triangular(&diff)
        .expect("cholesky factor has a zero pivot");
    let log_det: f64 = (0..n).map(|i| chol[(i, i)].ln()).sum::<f64>() * 2.0;
    -0.5 * (n as f64 * (2.0 * PI).ln() + log_det + z.norm_squared())
}

/// Exact multivariate normal log-density `log N(x; mean, cov)`.
pub fn log_gaussian_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: cov.nrows() });
    }
    let chol = Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance)?.l();
    Ok(log_gaussian_density_chol(x, mean, &chol))
}

/// Turns log-weights into normalized weights via log-sum-exp.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let shifted: Vec<f64> = log_weights.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    Ok(shifted.into_iter().map(|w| w / total).collect())
}

/// `log Σ exp(l_i)`, or `-inf` when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Inverse-CDF lookup: smallest index `i` with positive weight and
/// `u <= Σ_{j<=i} w_j`. A draw landing exactly on a boundary picks the lower index.
pub fn categorical_index(weights: &[f64], u: f64) -> usize {
    let mut cdf = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        cdf += w;
        last_positive = i;
        if u <= cdf {
            return i;
        }
    }
    last_positive
}

/// Draws an index with probability `weights[i]` from a single uniform.
pub fn categorical_draw(rng: &mut RngStream, weights: &[f64]) -> usize {
    categorical_index(weights, rng.uniform())
}
