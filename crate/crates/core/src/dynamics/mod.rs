//! Test dynamical systems, their propagators, and the range observation model.

mod ikeda;
mod lorenz;
mod observation;
mod ode;

pub use ikeda::{ikeda_forward, ikeda_inverse, ikeda_inverse_unchecked, IkedaParams};
pub use lorenz::{lorenz_vector_field, Lorenz63Params};
pub use observation::{range_jacobian, range_observe, LinearObservation, Observation, RangeObservation};
pub use ode::{integrate, integrate_with, rk4_step, substep_count, tsit5_step, Scheme};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_factor, gaussian_sample};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum System {
    Ikeda(IkedaParams),
    Lorenz63(Lorenz63Params),
}

impl System {
    pub fn dim(&self) -> usize {
        match self {
            System::Ikeda(_) => 2,
            System::Lorenz63(_) => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::Ikeda(_) => "ikeda",
            System::Lorenz63(_) => "lorenz63",
        }
    }
}

/// Noise-free flow map `Φ(Δt, ·)`.
///
/// For the Ikeda map `Δt` counts map iterations and must be a positive
/// integer. For Lorenz '63 it is a time span integrated with `Δt / h` fixed
/// steps of the chosen scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagator {
    system: System,
    step: f64,
    substep: f64,
    scheme: Scheme,
    count: usize,
}

impl Propagator {
    pub fn new(system: System, step: f64, substep: f64, scheme: Scheme) -> Result<Self> {
        let count = match system {
            System::Ikeda(p) => {
                if !(p.u > 0.0 && p.u < 1.0) {
                    return Err(Error::Config(format!("Ikeda parameter u = {} must lie in (0, 1)", p.u)));
                }
                if !(step >= 1.0 && step.fract() == 0.0) {
                    return Err(Error::Config(format!(
                        "Ikeda step {step} must be a positive whole number of iterations"
                    )));
                }
                step as usize
            }
            System::Lorenz63(p) => {
                if !(p.sigma > 0.0 && p.rho > 0.0 && p.beta > 0.0) {
                    return Err(Error::Config("Lorenz '63 parameters must be positive".into()));
                }
                substep_count(step, substep)?
            }
        };
        Ok(Propagator {
            system,
            step,
            substep,
            scheme,
            count,
        })
    }

    /// Ikeda with `Δt` iterations per step.
    pub fn ikeda(p: IkedaParams, iterations: usize) -> Result<Self> {
        Self::new(System::Ikeda(p), iterations as f64, 1.0, Scheme::Rk4)
    }

    /// Lorenz '63 with RK4 at internal step `h`.
    pub fn lorenz63(p: Lorenz63Params, dt: f64, h: f64) -> Result<Self> {
        Self::new(System::Lorenz63(p), dt, h, Scheme::Rk4)
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn substep(&self) -> f64 {
        self.substep
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Same system and internal step, different `Δt`.
    pub fn with_step(&self, step: f64) -> Result<Self> {
        Self::new(self.system, step, self.substep, self.scheme)
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn propagate(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.dim());
        match &self.system {
            System::Ikeda(p) => {
                let mut s = [x[0], x[1]];
                for _ in 0..self.count {
                    s = ikeda_forward(s, p);
                }
                DVector::from_column_slice(&s)
            }
            System::Lorenz63(p) => {
                let s = integrate_with([x[0], x[1], x[2]], p, self.count, self.substep, self.scheme);
                DVector::from_column_slice(&s)
            }
        }
    }
}

/// A simulated truth trajectory with its noisy observations.
///
/// `states[k]` is the state after `k + 1` propagation steps from the initial
/// condition and `observations[k]` is the measurement of that state.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

pub fn simulate_truth(
    rng: &mut RngStream,
    x0: &DVector<f64>,
    prop: &Propagator,
    obs: &dyn Observation,
    steps: usize,
) -> Result<Truth> {
    if steps == 0 {
        return Err(Error::Config("truth simulation needs at least one step".into()));
    }
    let noise_chol = cholesky_factor(obs.noise_cov(), 0.0)?;
    let zero = DVector::zeros(obs.dim());
    let mut states = Vec::with_capacity(steps);
    let mut observations = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for _ in 0..steps {
        x = prop.propagate(&x);
        let y = obs.observe(&x) + gaussian_sample(rng, &zero, &noise_chol);
        states.push(x.clone());
        observations.push(y);
    }
    Ok(Truth { states, observations })
}

/// Convenience for building a column from a slice.
pub fn vector(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}


#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn propagator_validation() {
        assert!(Propagator::new(System::Ikeda(IkedaParams::default()), 1.5, 1.0, Scheme::Rk4).is_err());
        assert!(Propagator::new(System::Ikeda(IkedaParams { u: 1.0 }), 1.0, 1.0, Scheme::Rk4).is_err());
        assert!(Propagator::lorenz63(Lorenz63Params::default(), 0.125, 0.01).is_err());
        assert!(Propagator::lorenz63(Lorenz63Params::default(), 0.12, 0.01).is_ok());
    }

    #[test]
    fn ikeda_propagator_iterates() {
        let p = IkedaParams::default();
        let prop = Propagator::ikeda(p, 3).unwrap();
        let mut s = [0.3, -0.2];
        for _ in 0..3 {
            s = ikeda_forward(s, &p);
        }
        assert_eq!(prop.propagate(&dvector![0.3, -0.2]), dvector![s[0], s[1]]);
    }

    #[test]
    fn zero_noise_observations_are_exact() {
        let prop = Propagator::ikeda(IkedaParams::default(), 1).unwrap();
        let obs = RangeObservation::new(dvector![0.0, 0.0], 0.0).unwrap();
        let t = simulate_truth(&mut RngStream::new(1), &dvector![1.25, 0.0], &prop, &obs, 50).unwrap();
        for (x, y) in t.states.iter().zip(&t.observations) {
            assert_eq!(y[0], x.norm());
        }
    }

    #[test]
    fn simulation_is_reproducible_and_states_ignore_noise() {
        let prop = Propagator::lorenz63(Lorenz63Params::default(), 0.12, 0.01).unwrap();
        let obs = RangeObservation::new(dvector![6.0 * 2f64.sqrt(), 6.0 * 2f64.sqrt(), 27.0], 4.0).unwrap();
        let x0 = dvector![8.0, 0.0, 0.0];
        let a = simulate_truth(&mut RngStream::new(5), &x0, &prop, &obs, 40).unwrap();
        let b = simulate_truth(&mut RngStream::new(5), &x0, &prop, &obs, 40).unwrap();
        let c = simulate_truth(&mut RngStream::new(6), &x0, &prop, &obs, 40).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states, c.states);
        assert_ne!(a.observations, c.observations);
        assert!(simulate_truth(&mut RngStream::new(5), &x0, &prop, &obs, 0).is_err());
    }

    #[test]
    fn ikeda_truth_stays_in_ball() {
        let prop = Propagator::ikeda(IkedaParams::default(), 1).unwrap();
        let obs = RangeObservation::new(dvector![0.0, 0.0], 4.0).unwrap();
        let t = simulate_truth(&mut RngStream::new(2), &dvector![1.25, 0.0], &prop, &obs, 1100).unwrap();
        let bound = 10f64.sqrt() + 1.0;
        assert!(t.states[100..].iter().all(|x| x.norm() <= bound));
    }
}
