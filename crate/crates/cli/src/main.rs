use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diengmf::flow::ModelFile;
use diengmf::harness::{self, ErrorBars, Experiment, ExperimentConfig};
use diengmf::training::{self, TrainConfig};
use diengmf::Error;
use nalgebra::DMatrix;

/// Ensemble Gaussian mixture filtering experiments with physicality discriminators.
#[derive(Parser)]
#[command(name = "diengmf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bars {
    Std,
    Sem3,
}

impl From<Bars> for ErrorBars {
    fn from(b: Bars) -> Self {
        match b {
            Bars::Std => ErrorBars::Std,
            Bars::Sem3 => ErrorBars::Sem3,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Grid-search, train and calibrate a flow from a training config.
    TrainFlow {
        config: PathBuf,
        #[arg(long, default_value = "flow-out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// 20000 epochs and the full architecture grid.
        #[arg(long = "paper-scale")]
        full_scale: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// (Re)compute the density threshold of a model in place.
    Calibrate {
        model: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        quantile: Option<f64>,
        /// Write the calibrated model here instead of overwriting the input.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print log-density and verdict for each row of a points CSV.
    Discriminate { model: PathBuf, points: PathBuf },
    /// Run a filtering experiment and write runs.csv, summary.csv and rmse_vs_N.svg.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// 32 Monte Carlo runs and the full ensemble-size range.
        #[arg(long = "paper-scale")]
        full_scale: bool,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Redraw rmse_vs_N.svg from a summary.csv.
    Plot {
        summary: PathBuf,
        #[arg(long, value_enum, default_value = "std")]
        error_bars: Bars,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "RMSE vs ensemble size")]
        title: String,
    },
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => 3,
            Error::TrainingDiverged { .. } | Error::SearchFailed => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::TrainFlow {
            config,
            out_dir,
            seed,
            full_scale,
            threads,
        } => with_threads(threads, || train_flow(&config, &out_dir, seed, full_scale)),
        Command::Calibrate {
            model,
            samples,
            quantile,
            output,
        } => calibrate(&model, samples, quantile, output.as_deref()),
        Command::Discriminate { model, points } => discriminate(&model, &points),
        Command::Run {
            config,
            seed,
            full_scale,
            out_dir,
            threads,
        } => with_threads(threads, || run(&config, seed, full_scale, &out_dir)),
        Command::Plot {
            summary,
            error_bars,
            output,
            title,
        } => plot(&summary, error_bars.into(), output, &title),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn with_threads(threads: Option<usize>, f: impl FnOnce() -> CliResult + Send) -> CliResult {
    match threads {
        None => f(),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().map_err(|e| Failure {
                code: 1,
                message: format!("cannot build a pool of {t} threads: {e}"),
            })?;
            pool.install(f)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train_flow(config: &Path, out_dir: &Path, seed: Option<u64>, full_scale: bool) -> CliResult {
    let mut config = TrainConfig::load(config)?;
    if full_scale {
        config = config.full_scale();
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let cells = out_dir.join("cells");
    create_dir(&cells)?;
    log::info!(
        "training {} grid cells for {} epochs",
        config.grid.cells().len(),
        config.epochs
    );
    let result = training::grid_search(&config, Some(&cells))?;
    let best = &result.cells[result.best];
    log::info!(
        "best cell D={} W={} K={} init={} test NLL {:.4}",
        best.depth,
        best.width,
        best.bins,
        best.init,
        result.trained.final_test_nll
    );
    let mut model = training::model_file(&config, &result.trained, None);
    let log_tau = training::calibrate_model(&mut model)?;
    log::info!("calibrated log τ = {log_tau:.6}");
    let model_path = out_dir.join("model.json");
    model.save(&model_path)?;
    training::write_loss_csv(&out_dir.join("loss.csv"), &result.trained.losses)?;
    training::write_grid_csv(&out_dir.join("grid.csv"), &result.cells)?;
    println!("{}", model_path.display());
    Ok(())
}

fn calibrate(path: &Path, samples: Option<usize>, quantile: Option<f64>, output: Option<&Path>) -> CliResult {
    let mut model = ModelFile::load(path)?;
    let mut config = training::provenance_config(&model)?;
    if let Some(m) = samples {
        config.calibration.samples = m;
    }
    if let Some(q) = quantile {
        config.calibration.quantile = q;
    }
    config.validate()?;
    let c = config.calibration;
    let log_tau = training::calibrate_threshold(
        &model.flow,
        &config,
        &mut training::calibration_rng(&config),
        c.samples,
        c.quantile,
    )?;
    model.log_tau = Some(log_tau);
    model.save(output.unwrap_or(path))?;
    println!("{log_tau:.17e}");
    Ok(())
}

fn read_points(path: &Path, dim: usize) -> Result<DMatrix<f64>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut columns = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() == dim => columns.extend(v),
            Ok(v) => {
                return Err(Error::parse(path, format!("line {}: expected {dim} values, got {}", i + 1, v.len())));
            }
            // A non-numeric first line is a header.
            Err(_) if i == 0 => {}
            Err(e) => return Err(Error::parse(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(DMatrix::from_column_slice(dim, columns.len() / dim, &columns))
}

fn discriminate(model: &Path, points: &Path) -> CliResult {
    let model = ModelFile::load(model)?;
    let log_tau = model
        .log_tau
        .ok_or_else(|| Error::Config("model has no calibrated threshold; run `calibrate` first".into()))?;
    let pts = read_points(points, model.flow.dim())?;
    let log_d = model.flow.log_density_batch(&pts);
    let header: Vec<String> = (1..=model.flow.dim()).map(|i| format!("x{i}")).collect();
    println!("{},log_density,accept", header.join(","));
    for (col, l) in pts.column_iter().zip(log_d) {
        let xs: Vec<String> = col.iter().map(|v| v.to_string()).collect();
        println!("{},{:.16e},{}", xs.join(","), l, (l >= log_tau) as u8);
    }
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, full_scale: bool, out_dir: &Path) -> CliResult {
    let mut config = ExperimentConfig::load(config)?;
    if full_scale {
        config = config.full_scale();
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let bars = config.error_bars;
    let title = format!("{} filtering RMSE", config.system.name());
    let experiment = Experiment::new(config)?;
    let records = experiment.run();
    let (summary, paths) = harness::emit_outputs(out_dir, &records, bars, &title)?;
    for row in &summary {
        println!(
            "{:<24} N={:<4} mean RMSE {:.4}  SEM {:.4}  runs {}  diverged {}",
            row.filter, row.ensemble_size, row.mean_rmse, row.sem, row.runs, row.diverged
        );
    }
    log::info!("wrote {}, {} and {}", paths.runs.display(), paths.summary.display(), paths.plot.display());
    if records.iter().all(|r| r.diverged) {
        return Err(Failure {
            code: 2,
            message: "every run diverged".into(),
        });
    }
    Ok(())
}

fn plot(summary: &Path, bars: ErrorBars, output: Option<PathBuf>, title: &str) -> CliResult {
    let rows = harness::read_summary_csv(summary)?;
    let out = output.unwrap_or_else(|| summary.with_file_name("rmse_vs_N.svg"));
    harness::write_svg(&out, &rows, bars, title)?;
    println!("{}", out.display());
    Ok(())
}
