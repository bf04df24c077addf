use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Measurement operator `y = h(x) + η`, `η ~ N(0, R)`, with its Jacobian.
pub trait Observation: Send + Sync {
    /// Dimension of `y`.
    fn dim(&self) -> usize;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `dh/dx` evaluated at `x`, `dim() × n`.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn noise_cov(&self) -> &DMatrix<f64>;
}

/// Scalar range `‖x - center‖₂` with noise variance `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeObservation {
    center: DVector<f64>,
    noise: DMatrix<f64>,
}

impl RangeObservation {
    pub fn new(center: DVector<f64>, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::Config(format!("range noise variance {noise_var} must be non-negative")));
        }
        Ok(RangeObservation {
            center,
            noise: DMatrix::from_element(1, 1, noise_var),
        })
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn noise_var(&self) -> f64 {
        self.noise[(0, 0)]
    }
}

pub fn range_observe(x: &DVector<f64>, m: &RangeObservation) -> f64 {
    (x - &m.center).norm()
}

/// `(x - center)ᵀ / ‖x - center‖`; undefined at the center itself.
pub fn range_jacobian(x: &DVector<f64>, m: &RangeObservation) -> Result<DVector<f64>> {
    let d = x - &m.center;
    let r = d.norm();
    if r == 0.0 {
        return Err(Error::SingularJacobian);
    }
    Ok(d / r)
}

impl Observation for RangeObservation {
    fn dim(&self) -> usize {
        1
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, range_observe(x, self))
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match range_jacobian(x, self) {
            Ok(row) => DMatrix::from_row_slice(1, row.len(), row.as_slice()),
            Err(_) => {
                log::warn!("state coincides with the range center; using a zero Jacobian");
                DMatrix::zeros(1, x.len())
            }
        }
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise
    }
}

/// Linear observation `y = H x + η`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    pub h: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

impl Observation for LinearObservation {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.h.clone()
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise
    }
}
