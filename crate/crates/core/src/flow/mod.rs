//! Normalizing-flow density model.
//!
//! The data-generating direction is
//! `u → RQS₁ → PLU₁ → … → RQS_L → PLU_L → ×s → x` with `u ~ N(0, I)`.
//! Densities are evaluated through the inverse direction.

mod coupling;
mod mlp;
mod model_file;
mod plu;
mod spline;

pub use coupling::CouplingLayer;
pub use mlp::{gelu, Dense, Mlp};
pub use model_file::{ModelFile, MODEL_FORMAT, MODEL_VERSION};
pub use plu::PluLayer;
pub use spline::{raw_len, rqs_apply, Direction, RqsParams, MIN_BIN_FRACTION, MIN_DERIVATIVE};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    /// Number of (coupling, PLU) pairs.
    pub layers: usize,
    pub bins: usize,
    /// Hidden layers of each conditioner.
    pub depth: usize,
    pub width: usize,
    pub tail_bound: f64,
}

impl FlowConfig {
    pub fn new(dim: usize, depth: usize, width: usize, bins: usize) -> Self {
        FlowConfig {
            dim,
            layers: 6,
            bins,
            depth,
            width,
            tail_bound: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("flow dimension must be at least 2, got {}", self.dim)));
        }
        if self.layers == 0 || self.bins == 0 || self.width == 0 {
            return Err(Error::Config("flow layers, bins and width must be positive".into()));
        }
        if !(self.tail_bound > 0.0 && self.tail_bound.is_finite()) {
            return Err(Error::Config(format!("tail bound must be positive, got {}", self.tail_bound)));
        }
        Ok(())
    }
}

/// Alternating mask for coupling layer `layer`: the first `⌈n/2⌉`
/// coordinates condition on even layers, the rest on odd layers.
pub fn coupling_mask(dim: usize, layer: usize) -> Vec<bool> {
    let half = dim.div_ceil(2);
    (0..dim).map(|i| (i < half) != (layer % 2 == 1)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub config: FlowConfig,
    pub couplings: Vec<CouplingLayer>,
    pub plus: Vec<PluLayer>,
    pub log_scale: f64,
}

impl Flow {
    /// Identity-initialized flow followed by the global scale `scale`.
    pub fn new(config: FlowConfig, scale: f64, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("flow scale must be positive, got {scale}")));
        }
        let mut couplings = Vec::with_capacity(config.layers);
        let mut plus = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            couplings.push(CouplingLayer::new(
                coupling_mask(config.dim, l),
                config.bins,
                config.tail_bound,
                config.depth,
                config.width,
                rng,
            ));
            plus.push(PluLayer::with_permutation(rng.permutation(config.dim)));
        }
        Ok(Flow {
            config,
            couplings,
            plus,
            log_scale: scale.ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// `T(u)` and `log |det ∂T/∂u|`.
    pub fn forward(&self, u: &DVector<f64>) -> (DVector<f64>, f64) {
        let mut z = u.clone();
        let mut logdet = 0.0;
        for (c, p) in self.couplings.iter().zip(&self.plus) {
            let (y, l) = c.forward(&z);
            let (y, lp) = p.forward(&y);
            z = y;
            logdet += l + lp;
        }
        (z * self.scale(), logdet + self.dim() as f64 * self.log_scale)
    }

    /// `T⁻¹(x)` and `log |det ∂T⁻¹/∂x|`.
    pub fn inverse(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let (u, ld) = self.inverse_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        (u.column(0).into_owned(), ld[0])
    }

    /// Column-wise inverse with per-column log-determinants.
    pub fn inverse_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let mut z = x * (-self.log_scale).exp();
        let mut logdet = vec![-(self.dim() as f64) * self.log_scale; x.ncols()];
        for (c, p) in self.couplings.iter().zip(&self.plus).rev() {
            let zp = p.inverse_batch(&z);
            let (zc, lc) = c.apply_batch(&zp, Direction::Inverse);
            let lp = p.log_abs_det();
            for (ld, l) in logdet.iter_mut().zip(lc) {
                *ld += l - lp;
            }
            z = zc;
        }
        (z, logdet)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let (u, ld) = self.inverse(x);
        base_log_density(u.as_slice()) + ld
    }

    /// Log-density of every column of `x`.
    pub fn log_density_batch(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let (u, ld) = self.inverse_batch(x);
        u.column_iter()
            .zip(ld)
            .map(|(col, l)| base_log_density(col.as_slice()) + l)
            .collect()
    }

    pub fn sample(&self, rng: &mut RngStream) -> DVector<f64> {
        let u = DVector::from_fn(self.dim(), |_, _| rng.standard_normal());
        self.forward(&u).0
    }

    /// Mean negative log-likelihood of the columns of `batch`.
    pub fn nll_loss(&self, batch: &DMatrix<f64>) -> Result<f64> {
        self.check_batch(batch)?;
        let ld = self.log_density_batch(batch);
        Ok(-ld.iter().sum::<f64>() / ld.len() as f64)
    }

    fn check_batch(&self, batch: &DMatrix<f64>) -> Result<()> {
        if batch.ncols() == 0 {
            return Err(Error::InsufficientEnsemble { got: 0, need: 1 });
        }
        if batch.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: batch.nrows(),
            });
        }
        Ok(())
    }

    /// Loss and its exact gradient, returned as a flow-shaped structure.
    pub fn loss_gradient(&self, batch: &DMatrix<f64>) -> Result<(f64, Flow)> {
        self.check_batch(batch)?;
        let b = batch.ncols() as f64;
        let n = self.dim() as f64;
        let z0 = batch * (-self.log_scale).exp();
        let mut z = z0.clone();
        let mut logdet = vec![-n * self.log_scale; batch.ncols()];
        let mut plu_out = Vec::with_capacity(self.config.layers);
        let mut caches = Vec::with_capacity(self.config.layers);
        for (c, p) in self.couplings.iter().zip(&self.plus).rev() {
            let zp = p.inverse_batch(&z);
            let (zc, lc, cache) = c.inverse_cached(&zp);
            let lp = p.log_abs_det();
            for (ld, l) in logdet.iter_mut().zip(lc) {
                *ld += l - lp;
            }
            plu_out.push(zp);
            caches.push(cache);
            z = zc;
        }
        let loss = -z
            .column_iter()
            .zip(&logdet)
            .map(|(col, l)| base_log_density(col.as_slice()) + l)
            .sum::<f64>()
            / b;

        let mut grads = self.zeros_like();
        let g_ld = -1.0 / b;
        let mut g = &z / b;
        // Caches were pushed from the last layer down, so walk them in reverse.
        for l in 0..self.config.layers {
            let k = self.config.layers - 1 - l;
            g = self.couplings[l].inverse_backward(&caches[k], &g, g_ld, &mut grads.couplings[l].conditioner);
            g = self.plus[l].inverse_backward(&plu_out[k], &g, g_ld * b, &mut grads.plus[l]);
        }
        grads.log_scale = -g.component_mul(&z0).sum() - n * g_ld * b;
        Ok((loss, grads))
    }

    /// Same architecture with every trainable parameter zero.
    pub fn zeros_like(&self) -> Flow {
        Flow {
            config: self.config,
            couplings: self
                .couplings
                .iter()
                .map(|c| CouplingLayer {
                    mask: c.mask.clone(),
                    conditioner: c.conditioner.zeros_like(),
                    bins: c.bins,
                    bound: c.bound,
                })
                .collect(),
            plus: self.plus.iter().map(PluLayer::zeros_like).collect(),
            log_scale: 0.0,
        }
    }

    fn visit_parameters(&mut self, mut f: impl FnMut(&mut f64)) {
        for (c, p) in self.couplings.iter_mut().zip(self.plus.iter_mut()) {
            for d in &mut c.conditioner.layers {
                d.weight.iter_mut().for_each(&mut f);
                d.bias.iter_mut().for_each(&mut f);
            }
            p.lower.iter_mut().for_each(&mut f);
            p.upper.iter_mut().for_each(&mut f);
            p.log_diag.iter_mut().for_each(&mut f);
        }
        f(&mut self.log_scale);
    }

    /// All trainable parameters in a fixed order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().visit_parameters(|v| out.push(*v));
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) {
        let mut it = values.iter();
        self.visit_parameters(|v| *v = *it.next().expect("parameter vector too short"));
        assert!(it.next().is_none(), "parameter vector too long");
    }

    pub fn parameters_finite(&self) -> bool {
        self.parameters().iter().all(|v| v.is_finite())
    }
}

/// Standard-normal log-density.
pub fn base_log_density(u: &[f64]) -> f64 {
    -0.5 * (u.len() as f64 * LN_2PI + u.iter().map(|v| v * v).sum::<f64>())
}
