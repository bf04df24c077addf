//! Sequential-filtering experiments over ensemble sizes and Monte Carlo
//! replications, with CSV and SVG outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, FlowDiscriminator, Safeguards};
use crate::dynamics::{
    simulate_truth, IkedaParams, Lorenz63Params, Propagator, RangeObservation, Scheme, System, Truth,
};
use crate::error::{Error, Result};
use crate::filters::{filter_step, FilterKind, FilterSpec};
use crate::flow::ModelFile;
use crate::linalg::Ensemble;
use crate::rng::RngStream;

mod plot;
pub use plot::{render_svg, write_svg};

const STREAM_TRUTH: u64 = 11;
const STREAM_ENSEMBLE: u64 = 12;
const STREAM_ANALYSIS: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorBars {
    /// One sample standard deviation.
    #[default]
    Std,
    /// Three standard errors of the mean.
    Sem3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiscriminatorConfig {
    ClassicalIkeda {
        #[serde(default = "default_iterations")]
        iterations: usize,
    },
    /// Calibrated flow model; relative paths resolve against the config file.
    Flow { model: PathBuf },
    AlwaysAccept,
}

fn default_iterations() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FilterKindConfig {
    Enkf {
        #[serde(default = "default_inflation")]
        inflation: f64,
    },
    Engmf {
        /// Overrides the experiment-wide `s_beta`.
        #[serde(default)]
        s_beta: Option<f64>,
    },
    DiEngmf {
        #[serde(default)]
        s_beta: Option<f64>,
        discriminator: DiscriminatorConfig,
        #[serde(default)]
        baseline_accept: f64,
        #[serde(default = "default_max_rejections")]
        max_rejections: usize,
    },
}

fn default_inflation() -> f64 {
    1.01
}

fn default_max_rejections() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: FilterKindConfig,
}

impl FilterConfig {
    pub fn enkf() -> Self {
        FilterConfig {
            name: "EnKF".into(),
            kind: FilterKindConfig::Enkf { inflation: 1.01 },
        }
    }

    pub fn engmf() -> Self {
        FilterConfig {
            name: "EnGMF".into(),
            kind: FilterKindConfig::Engmf { s_beta: None },
        }
    }

    pub fn di_engmf(name: &str, discriminator: DiscriminatorConfig) -> Self {
        FilterConfig {
            name: name.into(),
            kind: FilterKindConfig::DiEngmf {
                s_beta: None,
                discriminator,
                baseline_accept: 0.0,
                max_rejections: 100,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub center: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise_var: f64,
}

fn default_noise() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub system: System,
    /// Time between observations (map iterations for Ikeda).
    pub step: f64,
    #[serde(default = "default_substep")]
    pub substep: f64,
    #[serde(default)]
    pub scheme: Scheme,
    pub observation: ObservationConfig,
    pub steps: usize,
    pub spinup: usize,
    pub truth_init: Vec<f64>,
    /// Isotropic variance of the initial prior ensemble around the truth.
    pub prior_variance: f64,
    #[serde(default = "default_s_beta")]
    pub s_beta: f64,
    pub filters: Vec<FilterConfig>,
    pub ensemble_sizes: Vec<usize>,
    #[serde(default = "default_monte_carlo")]
    pub monte_carlo: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub error_bars: ErrorBars,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    /// Directory that relative model paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_version() -> u32 {
    1
}
fn default_substep() -> f64 {
    0.01
}
fn default_s_beta() -> f64 {
    1.0
}
fn default_monte_carlo() -> usize {
    8
}
fn default_divergence() -> f64 {
    1e3
}

impl ExperimentConfig {
    /// Ikeda map, range to the origin, EnKF / EnGMF / classical DI-EnGMF.
    pub fn ikeda() -> Self {
        ExperimentConfig {
            version: 1,
            system: System::Ikeda(IkedaParams::default()),
            step: 1.0,
            substep: default_substep(),
            scheme: Scheme::default(),
            observation: ObservationConfig {
                center: vec![0.0, 0.0],
                noise_var: 4.0,
            },
            steps: 1100,
            spinup: 100,
            truth_init: vec![1.25, 0.0],
            prior_variance: 0.25,
            s_beta: 1.0,
            filters: vec![
                FilterConfig::enkf(),
                FilterConfig::engmf(),
                FilterConfig::di_engmf("Classical-DI-EnGMF", DiscriminatorConfig::ClassicalIkeda { iterations: 6 }),
            ],
            ensemble_sizes: vec![3, 4, 5, 7, 10, 15, 20],
            monte_carlo: 8,
            seed: 0,
            error_bars: ErrorBars::Std,
            divergence_threshold: 1e3,
            base_dir: PathBuf::new(),
        }
    }

    /// Lorenz '63, range to `(6√2, 6√2, 27)`, EnKF / EnGMF.
    pub fn lorenz63() -> Self {
        let c = 6.0 * 2f64.sqrt();
        ExperimentConfig {
            system: System::Lorenz63(Lorenz63Params::default()),
            step: 0.12,
            observation: ObservationConfig {
                center: vec![c, c, 27.0],
                noise_var: 4.0,
            },
            steps: 550,
            spinup: 50,
            truth_init: vec![8.0, 0.0, 0.0],
            prior_variance: 1.0,
            filters: vec![FilterConfig::enkf(), FilterConfig::engmf()],
            ensemble_sizes: vec![10, 20, 50, 100, 200],
            error_bars: ErrorBars::Sem3,
            ..Self::ikeda()
        }
    }

    /// 32 replications and the full ensemble-size ranges.
    pub fn full_scale(mut self) -> Self {
        self.monte_carlo = 32;
        self.ensemble_sizes = match self.system {
            System::Ikeda(_) => (3..=20).collect(),
            System::Lorenz63(_) => (1..=20).map(|k| 10 * k).collect(),
        };
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != 1 {
            return fail(format!("unsupported experiment config version {}", self.version));
        }
        let n = self.system.dim();
        if self.truth_init.len() != n || self.observation.center.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: if self.truth_init.len() != n { self.truth_init.len() } else { self.observation.center.len() },
            });
        }
        if self.spinup >= self.steps {
            return fail(format!("spinup {} must be less than steps {}", self.spinup, self.steps));
        }
        if self.ensemble_sizes.is_empty() || self.ensemble_sizes.iter().any(|&s| s < 2) {
            return fail("ensemble sizes must be non-empty and at least 2".into());
        }
        if self.filters.is_empty() || self.monte_carlo == 0 {
            return fail("at least one filter and one Monte Carlo run are required".into());
        }
        let mut names: Vec<_> = self.filters.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return fail("filter names must be unique".into());
        }
        if !(self.prior_variance >= 0.0) || !(self.s_beta > 0.0) || !(self.divergence_threshold > 0.0) {
            return fail("prior variance, s_beta and divergence threshold must be positive".into());
        }
        self.propagator()?;
        RangeObservation::new(DVector::from_column_slice(&self.observation.center), self.observation.noise_var)?;
        Ok(())
    }

    pub fn propagator(&self) -> Result<Propagator> {
        Propagator::new(self.system, self.step, self.substep, self.scheme)
    }

    pub fn observation(&self) -> Result<RangeObservation> {
        RangeObservation::new(DVector::from_column_slice(&self.observation.center), self.observation.noise_var)
    }

    fn discriminator(&self, d: &DiscriminatorConfig) -> Result<Discriminator> {
        Ok(match d {
            DiscriminatorConfig::ClassicalIkeda { iterations } => match self.system {
                System::Ikeda(params) => Discriminator::ClassicalIkeda {
                    iterations: *iterations,
                    params,
                },
                _ => return Err(Error::Config("the classical discriminator needs the Ikeda system".into())),
            },
            DiscriminatorConfig::Flow { model } => {
                let path = if model.is_absolute() { model.clone() } else { self.base_dir.join(model) };
                let model = ModelFile::load(&path)?;
                if model.flow.dim() != self.system.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.system.dim(),
                        got: model.flow.dim(),
                    });
                }
                Discriminator::NormalizingFlow(Box::new(FlowDiscriminator::from_model(model)?))
            }
            DiscriminatorConfig::AlwaysAccept => Discriminator::AlwaysAccept,
        })
    }

    pub fn build_filters(&self) -> Result<Vec<FilterSpec>> {
        self.filters
            .iter()
            .map(|f| {
                let kind = match &f.kind {
                    FilterKindConfig::Enkf { inflation } => FilterKind::Enkf { inflation: *inflation },
                    FilterKindConfig::Engmf { s_beta } => FilterKind::Engmf {
                        s_beta: s_beta.unwrap_or(self.s_beta),
                    },
                    FilterKindConfig::DiEngmf {
                        s_beta,
                        discriminator,
                        baseline_accept,
                        max_rejections,
                    } => FilterKind::DiEngmf {
                        s_beta: s_beta.unwrap_or(self.s_beta),
                        discriminator: Arc::new(self.discriminator(discriminator)?),
                        safeguards: Safeguards::new(*baseline_accept, *max_rejections)?,
                    },
                };
                let spec = FilterSpec { name: f.name.clone(), kind };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

/// `sqrt(mean_k mean_j (truth_kj − mean_kj)²)` over steps `k ≥ spinup`.
pub fn rmse(truth: &[DVector<f64>], means: &[DVector<f64>], spinup: usize) -> Result<f64> {
    if truth.len() != means.len() {
        return Err(Error::Config(format!(
            "trajectory lengths differ: {} vs {}",
            truth.len(),
            means.len()
        )));
    }
    if truth.len() <= spinup {
        return Err(Error::Config(format!("trajectory of {} steps is not longer than spinup {spinup}", truth.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, m) in truth[spinup..].iter().zip(&means[spinup..]) {
        if t.len() != m.len() {
            return Err(Error::DimensionMismatch {
                expected: t.len(),
                got: m.len(),
            });
        }
        sum += (t - m).norm_squared();
        count += t.len();
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub filter: String,
    pub ensemble_size: usize,
    /// Monte Carlo replication index.
    pub seed: usize,
    pub rmse: f64,
    pub rejections: usize,
    pub diverged: bool,
}

/// A configured experiment with its filters, models and truths resolved.
pub struct Experiment {
    pub config: ExperimentConfig,
    filters: Vec<FilterSpec>,
    prop: Propagator,
    obs: RangeObservation,
    truths: Vec<Truth>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let filters = config.build_filters()?;
        let prop = config.propagator()?;
        let obs = config.observation()?;
        let x0 = DVector::from_column_slice(&config.truth_init);
        let master = RngStream::new(config.seed);
        let truths = (0..config.monte_carlo)
            .map(|mc| simulate_truth(&mut master.split(STREAM_TRUTH).split(mc as u64), &x0, &prop, &obs, config.steps))
            .collect::<Result<_>>()?;
        Ok(Experiment {
            config,
            filters,
            prop,
            obs,
            truths,
        })
    }

    pub fn filters(&self) -> &[FilterSpec] {
        &self.filters
    }

    pub fn truth(&self, mc: usize) -> &Truth {
        &self.truths[mc]
    }

    /// Prior ensemble of `size` members for replication `mc`.
    pub fn initial_ensemble(&self, size: usize, mc: usize) -> Ensemble {
        let mut rng = RngStream::new(self.config.seed).split(STREAM_ENSEMBLE).split(mc as u64);
        let sd = self.config.prior_variance.sqrt();
        let x0 = &self.config.truth_init;
        let members: Vec<_> = (0..size)
            .map(|_| DVector::from_fn(x0.len(), |i, _| x0[i] + sd * rng.standard_normal()))
            .collect();
        Ensemble::from_columns(&members)
    }

    /// Filters one replication and returns its analysis means, or `None` on failure.
    pub fn analysis_means(&self, filter: usize, size: usize, mc: usize) -> (Option<Vec<DVector<f64>>>, usize) {
        let spec = &self.filters[filter];
        let truth = &self.truths[mc];
        let mut rng = RngStream::new(self.config.seed)
            .split(STREAM_ANALYSIS)
            .split(mc as u64)
            .split(size as u64);
        let mut ens = self.initial_ensemble(size, mc);
        let mut means = Vec::with_capacity(self.config.steps);
        let mut rejections = 0;
        for y in &truth.observations {
            match filter_step(&mut rng, spec, &ens, y, &self.obs, &self.prop) {
                Ok((next, stats)) => {
                    rejections += stats.total_rejections();
                    ens = next;
                }
                Err(e) => {
                    log::debug!("{} N={size} run {mc}: {e}", spec.name);
                    return (None, rejections);
                }
            }
            let mean = ens.mean();
            if !ens.is_finite() || !mean.iter().all(|v| v.is_finite()) {
                return (None, rejections);
            }
            means.push(mean);
        }
        (Some(means), rejections)
    }

    pub fn run_single(&self, filter: usize, size: usize, mc: usize) -> RunRecord {
        let (means, rejections) = self.analysis_means(filter, size, mc);
        let rmse = means
            .and_then(|m| rmse(&self.truths[mc].states, &m, self.config.spinup).ok())
            .unwrap_or(f64::NAN);
        RunRecord {
            filter: self.filters[filter].name.clone(),
            ensemble_size: size,
            seed: mc,
            rmse,
            rejections,
            diverged: !(rmse <= self.config.divergence_threshold),
        }
    }

    /// Every (filter, N, replication) cell, in that nesting order.
    pub fn run(&self) -> Vec<RunRecord> {
        let mut cells = Vec::new();
        for f in 0..self.filters.len() {
            for &n in &self.config.ensemble_sizes {
                for mc in 0..self.config.monte_carlo {
                    cells.push((f, n, mc));
                }
            }
        }
        cells.par_iter().map(|&(f, n, mc)| self.run_single(f, n, mc)).collect()
    }

    /// [`Self::run`] on a dedicated pool of `threads` workers.
    pub fn run_with_threads(&self, threads: usize) -> Result<Vec<RunRecord>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(pool.install(|| self.run()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub filter: String,
    pub ensemble_size: usize,
    pub mean_rmse: f64,
    pub sem: f64,
    /// Non-diverged runs entering the statistics.
    pub runs: usize,
    pub std: f64,
    pub diverged: usize,
}

impl SummaryRow {
    pub fn error_bar(&self, bars: ErrorBars) -> f64 {
        match bars {
            ErrorBars::Std => self.std,
            ErrorBars::Sem3 => 3.0 * self.sem,
        }
    }
}

/// Mean, sample standard deviation and SEM per (filter, N), excluding
/// diverged runs. Groups keep their first-appearance order.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in records {
        let key = (r.filter.clone(), r.ensemble_size);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(filter, n)| {
            let group: Vec<_> = records.iter().filter(|r| r.filter == filter && r.ensemble_size == n).collect();
            let ok: Vec<f64> = group.iter().filter(|r| !r.diverged).map(|r| r.rmse).collect();
            let runs = ok.len();
            let mean = if runs > 0 { ok.iter().sum::<f64>() / runs as f64 } else { f64::NAN };
            let std = if runs > 1 {
                (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                filter,
                ensemble_size: n,
                mean_rmse: mean,
                sem: if runs > 0 { std / (runs as f64).sqrt() } else { f64::NAN },
                runs,
                std,
                diverged: group.len() - runs,
            }
        })
        .collect()
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

pub fn write_runs_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["filter", "N", "seed", "rmse", "rejections", "diverged"])
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record([
            r.filter.clone(),
            r.ensemble_size.to_string(),
            r.seed.to_string(),
            float(r.rmse),
            r.rejections.to_string(),
            (r.diverged as u8).to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let bad = |m: &str| Error::parse(path, m.to_string());
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        out.push(RunRecord {
            filter: row[0].to_string(),
            ensemble_size: row[1].parse().map_err(|_| bad("bad N"))?,
            seed: row[2].parse().map_err(|_| bad("bad seed"))?,
            rmse: row[3].parse().map_err(|_| bad("bad rmse"))?,
            rejections: row[4].parse().map_err(|_| bad("bad rejections"))?,
            diverged: &row[5] == "1",
        });
    }
    Ok(out)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["filter", "N", "mean_rmse", "sem", "runs", "std", "diverged"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.filter.clone(),
            r.ensemble_size.to_string(),
            float(r.mean_rmse),
            float(r.sem),
            r.runs.to_string(),
            float(r.std),
            r.diverged.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let bad = |m: &str| Error::parse(path, m.to_string());
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.len() < 5 {
            return Err(bad("expected at least 5 columns"));
        }
        let num = |i: usize| -> Result<f64> { row[i].parse().map_err(|_| bad("bad number")) };
        out.push(SummaryRow {
            filter: row[0].to_string(),
            ensemble_size: row[1].parse().map_err(|_| bad("bad N"))?,
            mean_rmse: num(2)?,
            sem: num(3)?,
            runs: row[4].parse().map_err(|_| bad("bad runs"))?,
            std: if row.len() > 5 { num(5)? } else { f64::NAN },
            diverged: if row.len() > 6 { row[6].parse().map_err(|_| bad("bad diverged"))? } else { 0 },
        });
    }
    Ok(out)
}

/// Paths written by [`emit_outputs`].
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub runs: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

/// Writes `runs.csv`, `summary.csv` and `rmse_vs_N.svg` into `dir`.
pub fn emit_outputs(dir: &Path, records: &[RunRecord], bars: ErrorBars, title: &str) -> Result<(Vec<SummaryRow>, OutputPaths)> {
    if records.is_empty() {
        return Err(Error::Config("no run records to write".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = OutputPaths {
        runs: dir.join("runs.csv"),
        summary: dir.join("summary.csv"),
        plot: dir.join("rmse_vs_N.svg"),
    };
    let summary = summarize(records);
    write_runs_csv(&paths.runs, records)?;
    write_summary_csv(&paths.summary, &summary)?;
    write_svg(&paths.plot, &summary, bars, title)?;
    Ok((summary, paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn rmse_examples() {
        let t = vec![dvector![1.0, 2.0]];
        assert_eq!(rmse(&t, &t, 0).unwrap(), 0.0);
        assert_eq!(rmse(&t, &[dvector![2.0, 3.0]], 0).unwrap(), 1.0);
        let t = vec![dvector![0.0], dvector![0.0]];
        assert_eq!(rmse(&t, &[dvector![0.0], dvector![2.0]], 0).unwrap(), 2f64.sqrt());
        assert_eq!(rmse(&t, &[dvector![9.0], dvector![2.0]], 1).unwrap(), 2.0);
        assert!(rmse(&t, &[dvector![0.0]], 0).is_err());
        assert!(rmse(&t, &t, 2).is_err());
    }

    #[test]
    fn summary_statistics() {
        let rec = |n: usize, v: f64, d: bool| RunRecord {
            filter: "A".into(),
            ensemble_size: n,
            seed: 0,
            rmse: v,
            rejections: 0,
            diverged: d,
        };
        let rows = summarize(&[rec(3, 1.0, false), rec(3, 3.0, false), rec(3, 1e9, true), rec(5, 2.0, false)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean_rmse, 2.0);
        assert_eq!(rows[0].std, 2f64.sqrt());
        assert_eq!(rows[0].sem, 1.0);
        assert_eq!(rows[0].runs, 2);
        assert_eq!(rows[0].diverged, 1);
        assert_eq!(rows[1].std, 0.0);
        assert_eq!(rows[0].error_bar(ErrorBars::Sem3), 3.0);
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [ExperimentConfig::ikeda(), ExperimentConfig::lorenz63(), ExperimentConfig::ikeda().full_scale()] {
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
        }
        assert_eq!(ExperimentConfig::lorenz63().full_scale().ensemble_sizes.len(), 20);
        let mut bad = ExperimentConfig::ikeda();
        bad.spinup = bad.steps;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn substreams_are_isolated() {
        let mut c = ExperimentConfig::ikeda();
        c.steps = 50;
        c.spinup = 10;
        c.monte_carlo = 2;
        let e = Experiment::new(c.clone()).unwrap();
        let again = Experiment::new(c).unwrap();
        assert_eq!(e.truth(1), again.truth(1));
        assert_ne!(e.truth(0).observations, e.truth(1).observations);
        let small = e.initial_ensemble(3, 0);
        let big = e.initial_ensemble(5, 0);
        assert_eq!(small.matrix().columns(0, 3), big.matrix().columns(0, 3));
    }

    #[test]
    fn always_accept_matches_engmf_bitwise() {
        let mut c = ExperimentConfig::ikeda();
        c.steps = 200;
        c.spinup = 20;
        c.monte_carlo = 1;
        c.filters = vec![
            FilterConfig::engmf(),
            FilterConfig::di_engmf("DI always", DiscriminatorConfig::AlwaysAccept),
        ];
        let e = Experiment::new(c).unwrap();
        let a = e.run_single(0, 7, 0);
        let b = e.run_single(1, 7, 0);
        assert_eq!(a.rmse.to_bits(), b.rmse.to_bits());
        assert!(!a.diverged);
    }

    #[test]
    fn outputs_round_trip() {
        let mut c = ExperimentConfig::ikeda();
        c.steps = 60;
        c.spinup = 10;
        c.monte_carlo = 3;
        c.ensemble_sizes = vec![3, 5];
        let e = Experiment::new(c).unwrap();
        let records = e.run();
        assert_eq!(records.len(), 3 * 2 * 3);
        let dir = tempfile::tempdir().unwrap();
        let (summary, paths) = emit_outputs(dir.path(), &records, ErrorBars::Std, "test").unwrap();
        let back = read_runs_csv(&paths.runs).unwrap();
        assert_eq!(back, records);
        let again = summarize(&back);
        let read = read_summary_csv(&paths.summary).unwrap();
        for ((a, b), c) in again.iter().zip(&summary).zip(&read) {
            assert!((a.mean_rmse - c.mean_rmse).abs() <= 1e-12);
            assert!((a.sem - c.sem).abs() <= 1e-12);
            assert_eq!(a, b);
        }
        let svg = std::fs::read_to_string(&paths.plot).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
        assert!(emit_outputs(dir.path(), &[], ErrorBars::Std, "x").is_err());
    }
}
