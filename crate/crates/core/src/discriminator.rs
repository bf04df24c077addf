//! Physicality discriminators and the safeguarded acceptance rule used by
//! discriminator-informed resampling.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{ikeda_inverse_unchecked, IkedaParams};
use crate::error::{Error, Result};
use crate::flow::{Flow, ModelFile};

/// Indicator-valued state test.
pub trait Discriminate: Send + Sync {
    fn accepts(&self, x: &DVector<f64>) -> bool;

    fn accepts_batch(&self, xs: &[DVector<f64>]) -> Vec<bool> {
        xs.iter().map(|x| self.accepts(x)).collect()
    }
}

impl<F> Discriminate for F
where
    F: Fn(&DVector<f64>) -> bool + Send + Sync,
{
    fn accepts(&self, x: &DVector<f64>) -> bool {
        self(x)
    }
}

/// `1` iff the `m`-fold inverse Ikeda map of `x` lies in the closed ball of
/// radius `sqrt(1 / (1 - u))` about the origin.
pub fn classical_ikeda(x: &DVector<f64>, m: usize, p: &IkedaParams) -> bool {
    assert_eq!(x.len(), 2, "the Ikeda discriminator acts on 2-d states");
    let mut s = [x[0], x[1]];
    for _ in 0..m {
        s = ikeda_inverse_unchecked(s, p.u);
        if !(s[0].is_finite() && s[1].is_finite()) {
            return false;
        }
    }
    s[0].hypot(s[1]) <= p.ball_radius()
}

/// Density-threshold test `log p(x) ≥ log τ` of a calibrated flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDiscriminator {
    pub flow: Flow,
    pub log_tau: f64,
}

impl FlowDiscriminator {
    pub fn new(flow: Flow, log_tau: f64) -> Result<Self> {
        if !log_tau.is_finite() {
            return Err(Error::Config(format!("density threshold log τ = {log_tau} must be finite")));
        }
        Ok(FlowDiscriminator { flow, log_tau })
    }

    pub fn from_model(model: ModelFile) -> Result<Self> {
        let log_tau = model
            .log_tau
            .ok_or_else(|| Error::Config("model has no calibrated threshold; run calibration first".into()))?;
        Self::new(model.flow, log_tau)
    }
}

pub fn nf_discriminate(x: &DVector<f64>, d: &FlowDiscriminator) -> bool {
    d.flow.log_density(x) >= d.log_tau
}

#[derive(Debug, Clone, PartialEq)]
pub enum Discriminator {
    ClassicalIkeda { iterations: usize, params: IkedaParams },
    NormalizingFlow(Box<FlowDiscriminator>),
    AlwaysAccept,
}

impl Discriminate for Discriminator {
    fn accepts(&self, x: &DVector<f64>) -> bool {
        match self {
            Discriminator::ClassicalIkeda { iterations, params } => classical_ikeda(x, *iterations, params),
            Discriminator::NormalizingFlow(d) => nf_discriminate(x, d),
            Discriminator::AlwaysAccept => true,
        }
    }

    fn accepts_batch(&self, xs: &[DVector<f64>]) -> Vec<bool> {
        match self {
            Discriminator::NormalizingFlow(d) if !xs.is_empty() => {
                let batch = DMatrix::from_columns(xs);
                d.flow.log_density_batch(&batch).into_iter().map(|l| l >= d.log_tau).collect()
            }
            _ => xs.iter().map(|x| self.accepts(x)).collect(),
        }
    }
}

/// Escape hatches for accept-reject resampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Safeguards {
    /// Acceptance probability of a rejected candidate.
    pub baseline_accept: f64,
    /// Rejections allowed per particle before the next candidate is accepted
    /// unconditionally.
    pub max_rejections: usize,
}

impl Default for Safeguards {
    fn default() -> Self {
        Safeguards {
            baseline_accept: 0.0,
            max_rejections: 100,
        }
    }
}

impl Safeguards {
    pub fn new(baseline_accept: f64, max_rejections: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&baseline_accept) {
            return Err(Error::Config(format!(
                "baseline acceptance {baseline_accept} must lie in [0, 1)"
            )));
        }
        Ok(Safeguards {
            baseline_accept,
            max_rejections,
        })
    }
}

/// Probability of accepting the `attempt`-th candidate (1-based) of a particle.
pub fn acceptance_probability(accepted: bool, sg: &Safeguards, attempt: usize) -> f64 {
    assert!(attempt >= 1, "attempts are counted from 1");
    if accepted || attempt > sg.max_rejections {
        1.0
    } else {
        sg.baseline_accept
    }
}
