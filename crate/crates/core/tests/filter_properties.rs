use diengmf::discriminator::{Discriminator, Safeguards};
use diengmf::dynamics::RangeObservation;
use diengmf::filters::{di_resample, engmf_resample, engmf_update};
use diengmf::linalg::Ensemble;
use diengmf::rng::RngStream;
use nalgebra::{dvector, DMatrix};
use proptest::prelude::*;

fn ensemble(values: &[f64]) -> Ensemble {
    Ensemble::new(DMatrix::from_column_slice(2, values.len() / 2, values))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixture_weights_are_normalized(
        values in prop::collection::vec(-20.0f64..20.0, 6..40),
        y in -1e3f64..1e3,
    ) {
        let values = &values[..values.len() / 2 * 2];
        let obs = RangeObservation::new(dvector![0.3, -0.2], 4.0).unwrap();
        let e = ensemble(values);
        prop_assume!(e.size() >= 3);
        let Ok(mix) = engmf_update(&e, &dvector![y], &obs, 1.0) else {
            // Degenerate (rank-deficient) spreads are allowed to fail loudly.
            return Ok(());
        };
        let total: f64 = mix.weights().iter().sum();
        prop_assert!(mix.weights().iter().all(|w| w.is_finite() && *w >= 0.0));
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn always_accept_matches_plain_resampling(seed in any::<u64>(), count in 1usize..60) {
        let obs = RangeObservation::new(dvector![0.0, 0.0], 4.0).unwrap();
        let e = ensemble(&[0.1, 0.4, 1.2, -0.3, 0.8, 0.9, -0.5, 0.2, 1.0, -1.1]);
        let mix = engmf_update(&e, &dvector![1.3], &obs, 1.0).unwrap();
        let a = engmf_resample(&mut RngStream::new(seed), &mix, count);
        let (b, stats) = di_resample(&mut RngStream::new(seed), &mix, count, &Discriminator::AlwaysAccept, &Safeguards::default());
        prop_assert_eq!(a.matrix(), b.matrix());
        prop_assert_eq!(stats.candidates(), count);
    }

    #[test]
    fn rejection_output_satisfies_discriminator(seed in any::<u64>()) {
        let obs = RangeObservation::new(dvector![0.0, 0.0], 4.0).unwrap();
        let e = ensemble(&[0.1, 0.4, 1.2, -0.3, 0.8, 0.9, -0.5, 0.2, 1.0, -1.1]);
        let mix = engmf_update(&e, &dvector![1.3], &obs, 1.0).unwrap();
        let half_plane = |x: &nalgebra::DVector<f64>| x[0] > 0.0;
        let (out, stats) = di_resample(&mut RngStream::new(seed), &mix, 25, &half_plane, &Safeguards::default());
        prop_assert_eq!(out.size(), 25);
        prop_assert_eq!(stats.exhausted, 0);
        prop_assert!(out.members().all(|x| x[0] > 0.0));
    }
}
