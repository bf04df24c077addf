//! Analysis updates: stochastic EnKF, EnGMF, and discriminator-informed EnGMF.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::discriminator::{acceptance_probability, Discriminate, Discriminator, Safeguards};
use crate::dynamics::{Observation, Propagator};
use crate::error::{Error, Result};
use crate::linalg::{
    categorical_draw, cholesky_factor, ensemble_mean_cov, gaussian_sample, log_gaussian_density_chol,
    normalize_log_weights, silverman_bandwidth, symmetrize, Ensemble,
};
use crate::rng::RngStream;

/// Weighted Gaussian mixture produced by the Gaussian-sum update.
#[derive(Debug, Clone)]
pub struct PosteriorMixture {
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
}

impl PosteriorMixture {
    /// Normalizes the log-weights and factors every covariance.
    pub fn new(means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>, log_weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != covs.len() || means.len() != log_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: means.len(),
                got: covs.len().min(log_weights.len()),
            });
        }
        let weights = normalize_log_weights(&log_weights)?;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let chols = covs.iter().map(|c| cholesky_factor(c, 0.0)).collect::<Result<_>>()?;
        Ok(PosteriorMixture {
            means,
            covs,
            chols,
            log_weights,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `Σ w_i μ_i`.
    pub fn mean(&self) -> DVector<f64> {
        self.means
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(self.dim()), |acc, (m, w)| acc + m * *w)
    }

    /// `Σ w_i (Σ_i + μ_i μ_iᵀ) − μ μᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for ((m, s), w) in self.means.iter().zip(&self.covs).zip(&self.weights) {
            let d = m - &mu;
            c += (s + &d * d.transpose()) * *w;
        }
        c
    }

    /// Categorical component index followed by a Gaussian draw from it.
    pub fn draw(&self, rng: &mut RngStream) -> DVector<f64> {
        let i = categorical_draw(rng, &self.weights);
        gaussian_sample(rng, &self.means[i], &self.chols[i])
    }
}

/// Per-component Kalman update of the kernels `N(x_i, prior_cov)`.
///
/// Every component is linearized at its own center; its weight is the
/// innovation likelihood `N(y; h(x_i), H_i P H_iᵀ + R)`.
pub fn gaussian_sum_update(
    centers: &[DVector<f64>],
    prior_cov: &DMatrix<f64>,
    y: &DVector<f64>,
    obs: &dyn Observation,
) -> Result<PosteriorMixture> {
    let n = prior_cov.nrows();
    if y.len() != obs.dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.dim(),
            got: y.len(),
        });
    }
    let mut means = Vec::with_capacity(centers.len());
    let mut covs = Vec::with_capacity(centers.len());
    let mut log_weights = Vec::with_capacity(centers.len());
    let eye = DMatrix::<f64>::identity(n, n);
    for x in centers {
        let h = obs.jacobian(x);
        let ph_t = prior_cov * h.transpose();
        let mut s = &h * &ph_t + obs.noise_cov();
        symmetrize(&mut s);
        let chol_s = cholesky_factor(&s, 0.0)?;
        let s_inv = invert_from_cholesky(&chol_s)?;
        let gain = &ph_t * s_inv;
        let predicted = obs.observe(x);
        means.push(x - &gain * (&predicted - y));
        let mut cov = (&eye - &gain * &h) * prior_cov;
        symmetrize(&mut cov);
        covs.push(cov);
        log_weights.push(log_gaussian_density_chol(y, &predicted, &chol_s));
    }
    PosteriorMixture::new(means, covs, log_weights)
}

fn invert_from_cholesky(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = l.nrows();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .ok_or(Error::SingularCovariance)?;
    Ok(l_inv.transpose() * l_inv)
}

/// EnGMF analysis: KDE with Silverman bandwidth, then the Gaussian-sum update.
pub fn engmf_update(forecast: &Ensemble, y: &DVector<f64>, obs: &dyn Observation, s_beta: f64) -> Result<PosteriorMixture> {
    let (_, cov) = ensemble_mean_cov(forecast)?;
    let beta2 = silverman_bandwidth(forecast.size(), forecast.dim(), s_beta);
    let centers: Vec<_> = forecast.members().collect();
    gaussian_sum_update(&centers, &(cov * beta2), y, obs)
}

/// Stochastic (perturbed-observation) EnKF analysis.
///
/// Anomalies are inflated about the mean, the observation operator is
/// linearized at the forecast mean, and member `i` assimilates `y + η_i`.
pub fn enkf_update(
    rng: &mut RngStream,
    forecast: &Ensemble,
    y: &DVector<f64>,
    obs: &dyn Observation,
    inflation: f64,
) -> Result<Ensemble> {
    if !(inflation >= 1.0) {
        return Err(Error::Config(format!("inflation {inflation} must be at least 1")));
    }
    let (mean, cov) = ensemble_mean_cov(forecast)?;
    let mut members = forecast.matrix().clone();
    for mut col in members.column_iter_mut() {
        let inflated = &mean + (&col - &mean) * inflation;
        col.copy_from(&inflated);
    }
    let cov = cov * (inflation * inflation);
    let h = obs.jacobian(&mean);
    let ph_t = &cov * h.transpose();
    let mut s = &h * &ph_t + obs.noise_cov();
    symmetrize(&mut s);
    let gain = &ph_t * invert_from_cholesky(&cholesky_factor(&s, 0.0)?)?;
    let chol_r = cholesky_factor(obs.noise_cov(), 0.0)?;
    let zero = DVector::zeros(obs.dim());
    for mut col in members.column_iter_mut() {
        let x = col.clone_owned();
        let perturbed = y + gaussian_sample(rng, &zero, &chol_r);
        col += &gain * (perturbed - obs.observe(&x));
    }
    Ok(Ensemble::new(members))
}

/// `count` independent draws from the mixture.
pub fn engmf_resample(rng: &mut RngStream, mix: &PosteriorMixture, count: usize) -> Ensemble {
    let draws: Vec<_> = (0..count).map(|_| mix.draw(rng)).collect();
    Ensemble::from_columns(&draws)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResampleStats {
    /// Rejected candidates per particle.
    pub rejections: Vec<usize>,
    /// Particles accepted by the exhaustion fallback.
    pub exhausted: usize,
}

impl ResampleStats {
    pub fn total_rejections(&self) -> usize {
        self.rejections.iter().sum()
    }

    pub fn candidates(&self) -> usize {
        self.total_rejections() + self.rejections.len()
    }
}

/// Accept-reject resampling against a discriminator.
///
/// Candidates are drawn in rounds: every still-pending particle draws one
/// candidate (in particle order) and the round is judged in one batch. A
/// uniform is consumed only when the acceptance probability lies strictly
/// between 0 and 1, so an always-accepting discriminator reproduces
/// [`engmf_resample`] exactly.
pub fn di_resample(
    rng: &mut RngStream,
    mix: &PosteriorMixture,
    count: usize,
    d: &dyn Discriminate,
    sg: &Safeguards,
) -> (Ensemble, ResampleStats) {
    let mut accepted: Vec<Option<DVector<f64>>> = vec![None; count];
    let mut stats = ResampleStats {
        rejections: vec![0; count],
        exhausted: 0,
    };
    let mut pending: Vec<usize> = (0..count).collect();
    while !pending.is_empty() {
        let candidates: Vec<_> = pending.iter().map(|_| mix.draw(rng)).collect();
        let verdicts = d.accepts_batch(&candidates);
        let mut still = Vec::new();
        for ((&i, x), ok) in pending.iter().zip(candidates).zip(verdicts) {
            let attempt = stats.rejections[i] + 1;
            let p = acceptance_probability(ok, sg, attempt);
            let take = if p >= 1.0 {
                true
            } else if p <= 0.0 {
                false
            } else {
                rng.uniform() < p
            };
            if take {
                if !ok && attempt > sg.max_rejections {
                    stats.exhausted += 1;
                }
                accepted[i] = Some(x);
            } else {
                stats.rejections[i] += 1;
                still.push(i);
            }
        }
        pending = still;
    }
    let columns: Vec<_> = accepted.into_iter().map(|x| x.expect("every particle accepted")).collect();
    (Ensemble::from_columns(&columns), stats)
}

#[derive(Debug, Clone)]
pub enum FilterKind {
    Enkf { inflation: f64 },
    Engmf { s_beta: f64 },
    DiEngmf {
        s_beta: f64,
        discriminator: Arc<Discriminator>,
        safeguards: Safeguards,
    },
}

#[derive(Debug, Clone)]
pub struct FilterSpec {
    pub name: String,
    pub kind: FilterKind,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            FilterKind::Enkf { inflation } if !(*inflation >= 1.0) => {
                Err(Error::Config(format!("{}: inflation must be at least 1", self.name)))
            }
            FilterKind::Engmf { s_beta } | FilterKind::DiEngmf { s_beta, .. } if !(*s_beta > 0.0) => {
                Err(Error::Config(format!("{}: s_beta must be positive", self.name)))
            }
            _ => Ok(()),
        }
    }
}

/// Forecast every member, then apply the filter's analysis.
pub fn filter_step(
    rng: &mut RngStream,
    spec: &FilterSpec,
    ensemble: &Ensemble,
    y: &DVector<f64>,
    obs: &dyn Observation,
    prop: &Propagator,
) -> Result<(Ensemble, ResampleStats)> {
    let forecast: Vec<_> = ensemble.members().map(|x| prop.propagate(&x)).collect();
    let forecast = Ensemble::from_columns(&forecast);
    analysis(rng, spec, &forecast, y, obs)
}

/// Analysis update of an already propagated ensemble.
pub fn analysis(
    rng: &mut RngStream,
    spec: &FilterSpec,
    forecast: &Ensemble,
    y: &DVector<f64>,
    obs: &dyn Observation,
) -> Result<(Ensemble, ResampleStats)> {
    let n = forecast.size();
    match &spec.kind {
        FilterKind::Enkf { inflation } => Ok((enkf_update(rng, forecast, y, obs, *inflation)?, ResampleStats::default())),
        FilterKind::Engmf { s_beta } => {
            let mix = engmf_update(forecast, y, obs, *s_beta)?;
            Ok((engmf_resample(rng, &mix, n), ResampleStats::default()))
        }
        FilterKind::DiEngmf {
            s_beta,
            discriminator,
            safeguards,
        } => {
            let mix = engmf_update(forecast, y, obs, *s_beta)?;
            Ok(di_resample(rng, &mix, n, discriminator.as_ref(), safeguards))
        }
    }
}
