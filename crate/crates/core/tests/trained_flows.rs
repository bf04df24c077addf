//! Properties of trained flows.

use diengmf::discriminator::{nf_discriminate, FlowDiscriminator};
use diengmf::flow::base_log_density;
use diengmf::rng::RngStream;
use diengmf::training::{attractor_samples, calibrate_threshold, calibration_rng, train, GridConfig, TrainConfig, TrainingData};
use nalgebra::{DMatrix, DVector};

fn quick(mut config: TrainConfig, seed: u64, epochs: usize) -> TrainConfig {
    config.seed = seed;
    config.epochs = epochs;
    config.grid = GridConfig::single(2, 16, 4);
    config
}

#[test]
fn trained_density_integrates_to_one() {
    let config = quick(TrainConfig::ikeda(), 21, 300);
    let flow = train(&config).unwrap().flow;
    // Importance sampling from a broad Gaussian covering the attractor.
    let (center, sigma) = ([0.6, -0.7], 2.0);
    let mut rng = RngStream::new(8);
    let count = 1_000_000;
    let chunk = 50_000;
    let mut total = 0.0;
    for _ in 0..count / chunk {
        let mut log_q = Vec::with_capacity(chunk);
        let xs = DMatrix::from_fn(2, chunk, |i, _| center[i] + sigma * rng.standard_normal());
        for col in xs.column_iter() {
            let r2: f64 = col.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum();
            log_q.push(-r2 / (2.0 * sigma * sigma) - (2.0 * std::f64::consts::PI * sigma * sigma).ln());
        }
        total += flow
            .log_density_batch(&xs)
            .iter()
            .zip(&log_q)
            .map(|(p, q)| (p - q).exp())
            .sum::<f64>();
    }
    let mass = total / count as f64;
    assert!((mass - 1.0).abs() < 0.02, "estimated mass {mass}");
}

fn desk(mut config: TrainConfig, seed: u64) -> TrainConfig {
    config.seed = seed;
    config.grid = GridConfig::single(8, 64, 4);
    config
}

#[test]
fn desk_training_beats_the_identity_flow() {
    let config = desk(TrainConfig::ikeda(), 1);
    let data = TrainingData::generate(&config).unwrap();
    let trained = train(&config).unwrap();
    // T = id and s = 1: the standard normal base density itself.
    let identity = data
        .test
        .column_iter()
        .map(|c| -base_log_density(c.as_slice()))
        .sum::<f64>()
        / data.test.ncols() as f64;
    let gain = identity - trained.final_test_nll;
    assert!(gain >= 1.0, "identity NLL {identity:.4}, trained {:.4}, gain {gain:.4}", trained.final_test_nll);
}

#[test]
fn lorenz_far_field_is_rejected() {
    let config = desk(TrainConfig::lorenz63(), 2);
    let flow = train(&config).unwrap().flow;
    let log_tau = calibrate_threshold(&flow, &config, &mut calibration_rng(&config), 10_000, 0.01).unwrap();
    let disc = FlowDiscriminator::new(flow, log_tau).unwrap();
    let points = attractor_samples(&mut RngStream::new(5), &config, 10_000, 100).unwrap();
    let lo: Vec<f64> = points.row_iter().map(|r| r.min()).collect();
    let hi: Vec<f64> = points.row_iter().map(|r| r.max()).collect();
    let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
    for axis in 0..3 {
        for (side, edge) in [(-1.0, lo[axis]), (1.0, hi[axis])] {
            let mut x = DVector::from_vec(mid.clone());
            x[axis] = edge + side * 10.0;
            assert!(!nf_discriminate(&x, &disc), "accepted far point {x:?}");
        }
    }
}
