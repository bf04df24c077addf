//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The filtering experiments train desk-sized flows in-process (one grid
//! cell, D=8, W=64, K=4, 2000 epochs), so this target takes several minutes
//! in a release-optimized test profile.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use diengmf::discriminator::{classical_ikeda, nf_discriminate, FlowDiscriminator, Safeguards};
use diengmf::dynamics::{IkedaParams, LinearObservation};
use diengmf::filters::{di_resample, gaussian_sum_update, PosteriorMixture};
use diengmf::flow::{Flow, FlowConfig, ModelFile};
use diengmf::harness::{summarize, write_runs_csv, DiscriminatorConfig, Experiment, ExperimentConfig, FilterConfig, SummaryRow};
use diengmf::rng::RngStream;
use diengmf::training::{attractor_samples, calibrate_threshold, calibration_rng, model_file, train, GridConfig, TrainConfig};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

/// Written straight to stderr so the line survives libtest's output capture.
fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id} {verdict}: {name} ({detail})");
    assert!(pass, "criterion {id} failed: {name} ({detail})");
}

struct Trained {
    model: ModelFile,
    path: PathBuf,
    config: TrainConfig,
}

/// Trains, calibrates and saves a desk flow under a scratch directory.
fn train_desk(mut config: TrainConfig, seed: u64, file: &str) -> Trained {
    config.seed = seed;
    config.grid = GridConfig::single(8, 64, 4);
    let trained = train(&config).expect("training");
    let log_tau = calibrate_threshold(
        &trained.flow,
        &config,
        &mut calibration_rng(&config),
        config.calibration.samples,
        config.calibration.quantile,
    )
    .expect("calibration");
    let model = model_file(&config, &trained, Some(log_tau));
    let path = scratch_dir().join(file);
    model.save(&path).expect("save model");
    Trained { model, path, config }
}

fn scratch_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("tempdir")).path()
}

fn ikeda_flow() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train_desk(TrainConfig::ikeda(), 1, "ikeda.json"))
}

fn lorenz_flow() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train_desk(TrainConfig::lorenz63(), 2, "lorenz63.json"))
}

fn ikeda_experiment_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::ikeda();
    config.ensemble_sizes = vec![3, 5, 10, 20];
    config.monte_carlo = 8;
    config.filters = vec![
        FilterConfig::enkf(),
        FilterConfig::engmf(),
        FilterConfig::di_engmf("Classical-DI-EnGMF", DiscriminatorConfig::ClassicalIkeda { iterations: 6 }),
        FilterConfig::di_engmf("NF-DI-EnGMF", DiscriminatorConfig::Flow { model: ikeda_flow().path.clone() }),
    ];
    config
}

fn ikeda_summary() -> &'static Vec<SummaryRow> {
    static CELL: OnceLock<Vec<SummaryRow>> = OnceLock::new();
    CELL.get_or_init(|| {
        let experiment = Experiment::new(ikeda_experiment_config()).expect("ikeda experiment");
        let rows = summarize(&experiment.run());
        for r in &rows {
            println!("ikeda {:>20} N={:<3} mean={:.4} sem={:.4} diverged={}", r.filter, r.ensemble_size, r.mean_rmse, r.sem, r.diverged);
        }
        rows
    })
}

fn row<'a>(rows: &'a [SummaryRow], filter: &str, n: usize) -> &'a SummaryRow {
    rows.iter()
        .find(|r| r.filter == filter && r.ensemble_size == n)
        .unwrap_or_else(|| panic!("no summary row for {filter} N={n}"))
}

#[test]
fn criterion_01_always_accept_reduces_to_engmf() {
    let mut config = ExperimentConfig::ikeda();
    config.ensemble_sizes = vec![10];
    config.monte_carlo = 2;
    config.filters = vec![
        FilterConfig::engmf(),
        FilterConfig::di_engmf("DI-always", DiscriminatorConfig::AlwaysAccept),
    ];
    assert_eq!(config.steps, 1100);
    let experiment = Experiment::new(config).unwrap();
    let mut identical = true;
    for mc in 0..2 {
        let (a, _) = experiment.analysis_means(0, 10, mc);
        let (b, rejections) = experiment.analysis_means(1, 10, mc);
        let (a, b) = (a.expect("EnGMF run"), b.expect("DI run"));
        identical &= rejections == 0
            && a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    report(1, "always-accept DI-EnGMF equals EnGMF bitwise", identical, "Ikeda, N=10, 1100 steps, 2 seeds");
}

#[test]
fn criterion_02_rejection_sampling_matches_truncated_mixture() {
    let means = [-1.0, 1.5];
    let vars = [0.25, 1.0];
    let weights = [0.3, 0.7];
    let (lo, hi) = (-1.2, 2.2);
    let mix = PosteriorMixture::new(
        means.iter().map(|&m| dvector![m]).collect(),
        vars.iter().map(|&v| dmatrix![v]).collect(),
        weights.iter().map(|w: &f64| w.ln()).collect(),
    )
    .unwrap();
    let inside = move |x: &DVector<f64>| x[0] >= lo && x[0] <= hi;
    let count = 100_000;
    let (e, _) = di_resample(&mut RngStream::new(2024), &mix, count, &inside, &Safeguards::default());

    // Target CDF by trapezoid integration of the unnormalized density.
    let pdf = |x: f64| {
        means
            .iter()
            .zip(&vars)
            .zip(&weights)
            .map(|((m, v), w)| w * (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
            .sum::<f64>()
    };
    let cells = 400_000;
    let dx = (hi - lo) / cells as f64;
    let mut cdf = vec![0.0; cells + 1];
    for i in 1..=cells {
        let (a, b) = (lo + (i - 1) as f64 * dx, lo + i as f64 * dx);
        cdf[i] = cdf[i - 1] + 0.5 * dx * (pdf(a) + pdf(b));
    }
    let total = cdf[cells];
    let target = |x: f64| {
        let t = ((x - lo) / dx).clamp(0.0, cells as f64);
        let i = (t.floor() as usize).min(cells - 1);
        (cdf[i] + (t - i as f64) * (cdf[i + 1] - cdf[i])) / total
    };
    let mut xs: Vec<f64> = e.members().map(|x| x[0]).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = target(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max);
    let all_inside = xs.iter().all(|&x| (lo..=hi).contains(&x));
    report(2, "accept-reject matches truncated mixture", ks < 0.006 && all_inside, &format!("KS = {ks:.5} at 1e5 samples"));
}

#[test]
fn criterion_03_single_component_is_kalman() {
    let p = dmatrix![2.0, 0.3; 0.3, 1.0];
    let obs = LinearObservation {
        h: dmatrix![1.0, 0.5; 0.0, 2.0],
        noise: dmatrix![0.4, 0.1; 0.1, 0.3],
    };
    let x = dvector![0.2, -1.0];
    let y = dvector![1.0, 0.5];
    let mix = gaussian_sum_update(&[x.clone()], &p, &y, &obs).unwrap();
    let s = &obs.h * &p * obs.h.transpose() + &obs.noise;
    let k = &p * obs.h.transpose() * s.try_inverse().unwrap();
    let mean = &x + &k * (&y - &obs.h * &x);
    let cov = (DMatrix::identity(2, 2) - &k * &obs.h) * &p;
    let err = (&mix.means()[0] - mean).amax().max((&mix.covariances()[0] - cov).amax());
    report(3, "single-component update equals Kalman", err < 1e-12, &format!("max abs error {err:.2e}"));
}

fn perturbed_flow(config: FlowConfig, seed: u64, spread: f64) -> Flow {
    let mut rng = RngStream::new(seed);
    let mut flow = Flow::new(config, 1.3, &mut rng).unwrap();
    let params: Vec<f64> = flow.parameters().iter().map(|_| spread * rng.standard_normal()).collect();
    flow.set_parameters(&params);
    flow
}

#[test]
fn criterion_04_flow_correctness() {
    let mut round_trip = 0.0f64;
    let mut logdet_rel = 0.0f64;
    for dim in [2, 3] {
        let flow = perturbed_flow(FlowConfig::new(dim, 2, 8, 4), 40 + dim as u64, 0.3);
        let mut rng = RngStream::new(7);
        for _ in 0..200 {
            let u = DVector::from_fn(dim, |_, _| rng.standard_normal());
            let (x, _) = flow.forward(&u);
            round_trip = round_trip.max((flow.inverse(&x).0 - &u).amax());
        }
        for _ in 0..10 {
            let x = DVector::from_fn(dim, |_, _| 1.5 * rng.standard_normal());
            let (_, ld) = flow.inverse(&x);
            let h = 1e-6;
            let jac = DMatrix::from_fn(dim, dim, |r, c| {
                let mut p = x.clone();
                p[c] += h;
                let mut m = x.clone();
                m[c] -= h;
                (flow.inverse(&p).0[r] - flow.inverse(&m).0[r]) / (2.0 * h)
            });
            let fd = jac.determinant().abs().ln();
            logdet_rel = logdet_rel.max((ld - fd).abs() / fd.abs().max(1.0));
        }
    }

    // Every parameter of the tiny flow against central differences.
    let mut config = FlowConfig::new(2, 2, 8, 4);
    config.layers = 2;
    let flow = perturbed_flow(config, 11, 0.25);
    let mut rng = RngStream::new(12);
    let batch = DMatrix::from_fn(2, 16, |_, _| 1.5 * rng.standard_normal());
    let (_, grads) = flow.loss_gradient(&batch).unwrap();
    let theta = flow.parameters();
    let g = grads.parameters();
    let h = 1e-5;
    let mut grad_rel = 0.0f64;
    for k in 0..theta.len() {
        let mut shifted = flow.clone();
        let mut t = theta.clone();
        t[k] += h;
        shifted.set_parameters(&t);
        let plus = shifted.nll_loss(&batch).unwrap();
        t[k] -= 2.0 * h;
        shifted.set_parameters(&t);
        let minus = shifted.nll_loss(&batch).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        grad_rel = grad_rel.max((g[k] - fd).abs() / fd.abs().max(1e-2));
    }
    let pass = round_trip < 1e-8 && logdet_rel < 1e-4 && grad_rel < 1e-4;
    report(
        4,
        "flow round trip, log-determinant and gradients",
        pass,
        &format!("round trip {round_trip:.1e}, logdet rel {logdet_rel:.1e}, gradient rel {grad_rel:.1e} over {} parameters", theta.len()),
    );
}

#[test]
fn criterion_05_attractor_points_pass_classical_test() {
    let config = TrainConfig::ikeda();
    let points = attractor_samples(&mut RngStream::new(5), &config, 1000, 100).unwrap();
    let params = IkedaParams::default();
    let mut failures = 0;
    for col in points.column_iter() {
        let x = col.clone_owned();
        failures += (0..=6).filter(|&m| !classical_ikeda(&x, m, &params)).count();
    }
    report(5, "attractor points accepted by the classical test", failures == 0, &format!("{failures} rejections over m = 0..6"));
}

#[test]
fn criterion_06_calibrated_flow_recall() {
    let trained = ikeda_flow();
    let disc = FlowDiscriminator::from_model(trained.model.clone()).unwrap();
    let fresh = attractor_samples(&mut RngStream::new(trained.config.seed).split(99), &trained.config, 10_000, 100).unwrap();
    let accepted = fresh.column_iter().filter(|c| nf_discriminate(&c.clone_owned(), &disc)).count();
    let recall = accepted as f64 / 1e4;
    report(6, "flow discriminator recall on fresh attractor points", recall >= 0.985, &format!("recall {recall:.4}"));
}

#[test]
fn criterion_07_ikeda_ordering() {
    let rows = ikeda_summary();
    let mut pass = true;
    let mut detail = Vec::new();
    for n in [3, 5] {
        let nf = row(rows, "NF-DI-EnGMF", n);
        let classical = row(rows, "Classical-DI-EnGMF", n);
        let engmf = row(rows, "EnGMF", n);
        let ordered = nf.mean_rmse < classical.mean_rmse && classical.mean_rmse < engmf.mean_rmse;
        let separated = engmf.mean_rmse - nf.mean_rmse >= nf.sem.max(engmf.sem);
        pass &= ordered && separated;
        detail.push(format!(
            "N={n}: NF {:.3} < classical {:.3} < EnGMF {:.3}",
            nf.mean_rmse, classical.mean_rmse, engmf.mean_rmse
        ));
    }
    report(7, "Ikeda ordering NF < classical < EnGMF", pass, &detail.join("; "));
}

#[test]
fn criterion_08_ikeda_enkf_level() {
    let rows = ikeda_summary();
    let best = [3, 5, 10, 20]
        .iter()
        .map(|&n| row(rows, "EnKF", n).mean_rmse)
        .fold(f64::INFINITY, f64::min);
    report(8, "best Ikeda EnKF RMSE in [1.0, 1.7]", (1.0..=1.7).contains(&best), &format!("best {best:.3}"));
}

#[test]
fn criterion_09_lorenz_ordering() {
    let mut config = ExperimentConfig::lorenz63();
    config.ensemble_sizes = vec![10, 50, 200];
    config.monte_carlo = 8;
    config.filters = vec![
        FilterConfig::enkf(),
        FilterConfig::engmf(),
        FilterConfig::di_engmf("NF-DI-EnGMF", DiscriminatorConfig::Flow { model: lorenz_flow().path.clone() }),
    ];
    let rows = summarize(&Experiment::new(config).unwrap().run());
    let mut pass = true;
    let mut detail = Vec::new();
    for n in [10, 50, 200] {
        let (enkf, engmf, nf) = (row(&rows, "EnKF", n), row(&rows, "EnGMF", n), row(&rows, "NF-DI-EnGMF", n));
        pass &= nf.mean_rmse <= engmf.mean_rmse && enkf.mean_rmse >= 2.0 * engmf.mean_rmse.max(nf.mean_rmse);
        detail.push(format!(
            "N={n}: NF {:.3}, EnGMF {:.3}, EnKF {:.3}",
            nf.mean_rmse, engmf.mean_rmse, enkf.mean_rmse
        ));
    }
    report(9, "Lorenz NF <= EnGMF and EnKF >= 2x both", pass, &detail.join("; "));
}

#[test]
fn criterion_10_runs_csv_is_reproducible() {
    let mut config = ikeda_experiment_config();
    config.ensemble_sizes = vec![3, 10];
    config.monte_carlo = 3;
    config.steps = 300;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (i, threads) in [1, 1, 3].into_iter().enumerate() {
        let records = Experiment::new(config.clone()).unwrap().run_with_threads(threads).unwrap();
        let path = dir.path().join(format!("runs{i}.csv"));
        write_runs_csv(&path, &records).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    let same = bytes.windows(2).all(|w| w[0] == w[1]);
    report(10, "runs.csv reproduces bitwise", same, "three runs, 1 and 3 worker threads");
}
