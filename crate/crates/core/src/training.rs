//! Maximum-likelihood training of the flow on attractor data, grid search
//! over conditioner architectures, and density-threshold calibration.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{IkedaParams, Lorenz63Params, Propagator, Scheme, System};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig, ModelFile};
use crate::rng::RngStream;

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_CALIBRATION: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub depth: Vec<usize>,
    pub width: Vec<usize>,
    pub bins: Vec<usize>,
    pub inits: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            depth: vec![8, 16],
            width: vec![64, 128],
            bins: vec![4, 8],
            inits: 2,
        }
    }
}

impl GridConfig {
    pub fn single(depth: usize, width: usize, bins: usize) -> Self {
        GridConfig {
            depth: vec![depth],
            width: vec![width],
            bins: vec![bins],
            inits: 1,
        }
    }

    pub fn full_scale() -> Self {
        GridConfig {
            depth: vec![8, 16, 32],
            width: vec![64, 128, 256],
            bins: vec![4, 8, 16],
            inits: 3,
        }
    }

    /// `(depth, width, bins, init)` in row-major order.
    pub fn cells(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for &d in &self.depth {
            for &w in &self.width {
                for &k in &self.bins {
                    for i in 0..self.inits {
                        out.push((d, w, k, i));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Validation sample count `M`.
    pub samples: usize,
    pub quantile: f64,
    /// Independent trajectories the samples are spread over.
    pub chains: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            samples: 10_000,
            quantile: 0.01,
            chains: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub system: System,
    #[serde(default)]
    pub scheme: Scheme,
    /// Internal integration step for continuous-time systems.
    #[serde(default = "default_substep")]
    pub substep: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Spin-up span before the first epoch (iterations or time units).
    #[serde(default = "default_spinup")]
    pub spinup: f64,
    /// Propagation per epoch.
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_tail_bound")]
    pub tail_bound: f64,
    /// Test loss is evaluated every this many epochs and at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Mean of the initial Gaussian; system default when absent.
    #[serde(default)]
    pub initial_mean: Option<Vec<f64>>,
    /// Isotropic variance of the initial Gaussian; system default when absent.
    #[serde(default)]
    pub initial_variance: Option<f64>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
}

fn default_version() -> u32 {
    1
}
fn default_substep() -> f64 {
    0.01
}
fn default_batch() -> usize {
    100
}
fn default_spinup() -> f64 {
    100.0
}
fn default_step() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    2000
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_clip() -> f64 {
    10.0
}
fn default_layers() -> usize {
    6
}
fn default_tail_bound() -> f64 {
    5.0
}
fn default_eval_every() -> usize {
    10
}

impl TrainConfig {
    /// Workstation-sized defaults for `system`.
    pub fn desk(system: System) -> Self {
        TrainConfig {
            version: 1,
            system,
            scheme: Scheme::default(),
            substep: default_substep(),
            batch_size: default_batch(),
            spinup: default_spinup(),
            step: default_step(),
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
            clip_norm: default_clip(),
            seed: 0,
            layers: default_layers(),
            tail_bound: default_tail_bound(),
            eval_every: default_eval_every(),
            initial_mean: None,
            initial_variance: None,
            grid: GridConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }

    pub fn ikeda() -> Self {
        Self::desk(System::Ikeda(IkedaParams::default()))
    }

    pub fn lorenz63() -> Self {
        Self::desk(System::Lorenz63(Lorenz63Params::default()))
    }

    /// Full epoch count and grid.
    pub fn full_scale(mut self) -> Self {
        self.epochs = 20_000;
        self.grid = GridConfig::full_scale();
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!("unsupported training config version {}", self.version)));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size and eval_every must be positive".into()));
        }
        if self.grid.cells().is_empty() {
            return Err(Error::Config("the architecture grid is empty".into()));
        }
        if !(0.0..1.0).contains(&self.calibration.quantile) || self.calibration.samples < 100 || self.calibration.chains == 0 {
            return Err(Error::Config(
                "calibration needs quantile in [0, 1), at least 100 samples and one chain".into(),
            ));
        }
        if let Some(m) = &self.initial_mean {
            if m.len() != self.system.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.system.dim(),
                    got: m.len(),
                });
            }
        }
        if self.initial_variance.is_some_and(|v| !(v >= 0.0)) {
            return Err(Error::Config("initial variance must be non-negative".into()));
        }
        self.propagator(self.step)?;
        if self.spinup > 0.0 {
            self.propagator(self.spinup)?;
        }
        self.flow_config(8, 64, 4).validate()
    }

    pub fn propagator(&self, step: f64) -> Result<Propagator> {
        Propagator::new(self.system, step, self.substep, self.scheme)
    }

    pub fn flow_config(&self, depth: usize, width: usize, bins: usize) -> FlowConfig {
        FlowConfig {
            dim: self.system.dim(),
            layers: self.layers,
            bins,
            depth,
            width,
            tail_bound: self.tail_bound,
        }
    }

    fn initial_gaussian(&self) -> (Vec<f64>, f64) {
        let (mean, var) = match self.system {
            System::Ikeda(_) => (vec![1.25, 0.0], 1.0 / 128.0),
            System::Lorenz63(_) => (vec![8.0, 0.0, 0.0], 1.0),
        };
        (
            self.initial_mean.clone().unwrap_or(mean),
            self.initial_variance.unwrap_or(var),
        )
    }
}

/// `count` draws from the initial Gaussian, each spun up for `config.spinup`.
pub fn generate_initial_batch(rng: &mut RngStream, config: &TrainConfig, count: usize) -> Result<DMatrix<f64>> {
    let (mean, var) = config.initial_gaussian();
    let sd = var.sqrt();
    let spin = if config.spinup > 0.0 { Some(config.propagator(config.spinup)?) } else { None };
    let n = mean.len();
    let mut batch = DMatrix::zeros(n, count);
    for mut col in batch.column_iter_mut() {
        let x = DVector::from_fn(n, |i, _| mean[i] + sd * rng.standard_normal());
        let x = match &spin {
            Some(p) => p.propagate(&x),
            None => x,
        };
        col.copy_from(&x);
    }
    Ok(batch)
}

fn propagate_batch(prop: &Propagator, batch: &mut DMatrix<f64>) {
    for mut col in batch.column_iter_mut() {
        let x = prop.propagate(&col.clone_owned());
        col.copy_from(&x);
    }
}

/// Largest per-coordinate root-mean-square of the batch about the origin.
///
/// The flow has no learnable shift, so the scale must bring the raw data, not
/// just its spread, inside the spline interval.
pub fn initial_scale(batch: &DMatrix<f64>) -> f64 {
    let count = batch.ncols() as f64;
    batch
        .row_iter()
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>() / count).sqrt())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub test_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedFlow {
    pub flow: Flow,
    pub losses: Vec<LossRecord>,
    pub final_train_nll: f64,
    pub final_test_nll: f64,
}

/// The shared training and held-out batches of a run.
pub struct TrainingData {
    pub train: DMatrix<f64>,
    pub test: DMatrix<f64>,
}

impl TrainingData {
    pub fn generate(config: &TrainConfig) -> Result<Self> {
        let master = RngStream::new(config.seed);
        Ok(TrainingData {
            train: generate_initial_batch(&mut master.split(STREAM_TRAIN), config, config.batch_size)?,
            test: generate_initial_batch(&mut master.split(STREAM_TEST), config, config.batch_size)?,
        })
    }
}

/// Identity-initialized flow for one grid cell.
pub fn initial_flow(config: &TrainConfig, data: &TrainingData, depth: usize, width: usize, bins: usize, init: usize) -> Result<Flow> {
    let key = ((depth as u64) << 40) ^ ((width as u64) << 24) ^ ((bins as u64) << 8) ^ init as u64;
    let mut rng = RngStream::new(config.seed).split(STREAM_INIT).split(key);
    Flow::new(config.flow_config(depth, width, bins), initial_scale(&data.train), &mut rng)
}

/// SGD with gradient-norm clipping: each epoch propagates the training batch
/// one step, evaluates the loss and its gradient, and updates the parameters.
pub fn train_flow(config: &TrainConfig, data: &TrainingData, mut flow: Flow) -> Result<TrainedFlow> {
    let prop = config.propagator(config.step)?;
    let mut batch = data.train.clone();
    let mut losses = Vec::with_capacity(config.epochs + 1);
    let initial_test = flow.nll_loss(&data.test)?;
    let mut train_nll = flow.nll_loss(&batch)?;
    losses.push(LossRecord {
        epoch: 0,
        train_nll,
        test_nll: Some(initial_test),
    });
    let mut theta = flow.parameters();
    for epoch in 1..=config.epochs {
        propagate_batch(&prop, &mut batch);
        let (loss, grads) = flow.loss_gradient(&batch)?;
        let mut g = grads.parameters();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        if norm > config.clip_norm {
            let f = config.clip_norm / norm;
            g.iter_mut().for_each(|v| *v *= f);
        }
        for (t, gv) in theta.iter_mut().zip(&g) {
            *t -= config.learning_rate * gv;
        }
        flow.set_parameters(&theta);
        train_nll = loss;
        let test_nll = if epoch % config.eval_every == 0 || epoch == config.epochs {
            let t = flow.nll_loss(&data.test)?;
            if !t.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss: t });
            }
            Some(t)
        } else {
            None
        };
        losses.push(LossRecord {
            epoch,
            train_nll: loss,
            test_nll,
        });
    }
    let final_test_nll = losses.last().and_then(|r| r.test_nll).unwrap_or(initial_test);
    Ok(TrainedFlow {
        flow,
        losses,
        final_train_nll: train_nll,
        final_test_nll,
    })
}

/// Trains a single architecture (the first grid cell).
pub fn train(config: &TrainConfig) -> Result<TrainedFlow> {
    config.validate()?;
    let data = TrainingData::generate(config)?;
    let (d, w, k, i) = config.grid.cells()[0];
    train_flow(config, &data, initial_flow(config, &data, d, w, k, i)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub depth: usize,
    pub width: usize,
    pub bins: usize,
    pub init: usize,
    /// `None` when training diverged.
    pub final_test_nll: Option<f64>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
    pub trained: TrainedFlow,
}

/// Index of the lowest finite test loss.
pub fn select_best(cells: &[GridCell]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.final_test_nll.filter(|v| v.is_finite()).map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// Trains every grid cell (in parallel) on shared data and keeps the lowest
/// final test loss. With `cell_dir`, every trained cell is saved there.
pub fn grid_search(config: &TrainConfig, cell_dir: Option<&Path>) -> Result<GridResult> {
    config.validate()?;
    let data = TrainingData::generate(config)?;
    let cells = config.grid.cells();
    let results: Vec<Result<TrainedFlow>> = cells
        .par_iter()
        .map(|&(d, w, k, i)| train_flow(config, &data, initial_flow(config, &data, d, w, k, i)?))
        .collect();
    let mut table = Vec::with_capacity(cells.len());
    let mut trained = Vec::with_capacity(cells.len());
    for (&(depth, width, bins, init), r) in cells.iter().zip(results) {
        let mut cell = GridCell {
            depth,
            width,
            bins,
            init,
            final_test_nll: None,
            path: None,
        };
        match r {
            Ok(t) => {
                cell.final_test_nll = Some(t.final_test_nll);
                if let Some(dir) = cell_dir {
                    let path = dir.join(format!("cell_D{depth}_W{width}_K{bins}_init{init}.json"));
                    model_file(config, &t, None).save(&path)?;
                    cell.path = Some(path);
                }
                trained.push(Some(t));
            }
            Err(e) => {
                log::warn!("grid cell D={depth} W={width} K={bins} init={init} failed: {e}");
                trained.push(None);
            }
        }
        table.push(cell);
    }
    let best = select_best(&table).ok_or(Error::SearchFailed)?;
    let trained = trained.swap_remove(best).expect("best cell has a trained flow");
    Ok(GridResult {
        cells: table,
        best,
        trained,
    })
}

/// `count` attractor states: `chains` initial draws are spun up and then
/// recorded after every further `config.step` of propagation.
pub fn attractor_samples(rng: &mut RngStream, config: &TrainConfig, count: usize, chains: usize) -> Result<DMatrix<f64>> {
    let chains = chains.clamp(1, count.max(1));
    let mut state = generate_initial_batch(rng, config, chains)?;
    let prop = config.propagator(config.step)?;
    let mut out = DMatrix::zeros(state.nrows(), count);
    let mut filled = 0;
    while filled < count {
        propagate_batch(&prop, &mut state);
        for col in state.column_iter() {
            if filled == count {
                break;
            }
            out.column_mut(filled).copy_from(&col);
            filled += 1;
        }
    }
    Ok(out)
}

/// Lower empirical quantile: entry `max(1, ⌈q·M⌉)` (1-based) of the ascending sort.
pub fn quantile_threshold(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    assert!((0.0..1.0).contains(&q), "quantile must lie in [0, 1)");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((q * sorted.len() as f64).ceil() as usize).max(1);
    sorted[idx - 1]
}

/// Log-density threshold `log τ` from `samples` fresh attractor points.
pub fn calibrate_threshold(flow: &Flow, config: &TrainConfig, rng: &mut RngStream, samples: usize, q: f64) -> Result<f64> {
    if samples < 100 {
        return Err(Error::Config(format!("calibration needs at least 100 samples, got {samples}")));
    }
    let points = attractor_samples(rng, config, samples, config.calibration.chains)?;
    let log_d = flow.log_density_batch(&points);
    if log_d.iter().any(|v| v.is_nan()) {
        return Err(Error::Config("flow density is NaN on validation data".into()));
    }
    Ok(quantile_threshold(&log_d, q))
}

/// Calibration stream used by [`calibrate_model`], distinct from training data.
pub fn calibration_rng(config: &TrainConfig) -> RngStream {
    RngStream::new(config.seed).split(STREAM_CALIBRATION)
}

/// Packs a trained flow, its threshold and the training provenance.
pub fn model_file(config: &TrainConfig, trained: &TrainedFlow, log_tau: Option<f64>) -> ModelFile {
    let c = &trained.flow.config;
    ModelFile {
        flow: trained.flow.clone(),
        log_tau,
        provenance: serde_json::json!({
            "train_config": config,
            "architecture": {"depth": c.depth, "width": c.width, "bins": c.bins},
            "final_train_nll": trained.final_train_nll,
            "final_test_nll": trained.final_test_nll,
        }),
    }
}

/// Recovers the training configuration stored in a model's provenance.
pub fn provenance_config(model: &ModelFile) -> Result<TrainConfig> {
    let value = model
        .provenance
        .get("train_config")
        .ok_or_else(|| Error::Config("model provenance has no training config".into()))?;
    serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("model provenance: {e}")))
}

/// Sets `log_tau` from the calibration settings of the model's provenance.
pub fn calibrate_model(model: &mut ModelFile) -> Result<f64> {
    let config = provenance_config(model)?;
    let c = config.calibration;
    let log_tau = calibrate_threshold(&model.flow, &config, &mut calibration_rng(&config), c.samples, c.quantile)?;
    model.log_tau = Some(log_tau);
    Ok(log_tau)
}

fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_nll,test_nll\n");
    for r in losses {
        let test = r.test_nll.map(csv_float).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.epoch, csv_float(r.train_nll), test));
    }
    write_file(path, &out)
}

pub fn write_grid_csv(path: &Path, cells: &[GridCell]) -> Result<()> {
    let mut out = String::from("D,W,K,init,final_test_nll,path\n");
    for c in cells {
        let nll = c.final_test_nll.map(csv_float).unwrap_or_else(|| "diverged".into());
        let p = c.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{}\n", c.depth, c.width, c.bins, c.init, nll, p));
    }
    write_file(path, &out)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
