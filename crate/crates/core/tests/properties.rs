use enkf_core::dynamics::{project_ball_v, BallSpec, DynamicsModel};
use enkf_core::enkf::{analysis_etkf, Ensemble, FilterConfig, FilterMoments, InflationMode, Normalization};
use enkf_core::experiments::{aggregate, ErrorRecord, ErrorSeries};
use enkf_core::linalg::{v_norm, ObservationMatrix, SymMatrix};
use enkf_core::nn::{nn_forward, MergeRouting, NetworkWeights};
use enkf_core::observe::ObservationSetup;
use enkf_core::surrogate::{estimate_model_error, SurrogateModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn state(d: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-20.0..20.0f64, d).prop_map(DVector::from_vec)
}

/// `(u, v, ball)` with a random observed subset.
fn projection_case() -> impl Strategy<Value = (DVector<f64>, DVector<f64>, BallSpec)> {
    (2usize..10).prop_flat_map(|d| {
        (
            state(d),
            state(d),
            prop::collection::vec(any::<bool>(), d),
            0.0..4.0f64,
            0.1..15.0f64,
        )
            .prop_map(move |(u, v, mask, beta, radius)| {
                let mut rows: Vec<usize> = (0..d).filter(|&i| mask[i]).collect();
                if rows.is_empty() {
                    rows.push(0);
                }
                let h = ObservationMatrix::selection(d, &rows).unwrap();
                (u, v, BallSpec::new(radius, beta, h).unwrap())
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_is_idempotent_and_feasible((u, _v, ball) in projection_case()) {
        let p = project_ball_v(&u, &ball).unwrap();
        prop_assert!(p.norm() <= ball.radius * (1.0 + 1e-12));
        let pp = project_ball_v(&p, &ball).unwrap();
        prop_assert!((&pp - &p).norm() <= 1e-12 * p.norm().max(1.0));
        if u.norm() <= ball.radius {
            prop_assert_eq!(p, u);
        }
    }

    #[test]
    fn projection_is_nonexpansive_in_v_norm((u, v, ball) in projection_case()) {
        let pu = project_ball_v(&u, &ball).unwrap();
        let pv = project_ball_v(&v, &ball).unwrap();
        let before = v_norm(&(&u - &v), ball.beta, &ball.h).unwrap();
        let after = v_norm(&(&pu - &pv), ball.beta, &ball.h).unwrap();
        prop_assert!(after <= before * (1.0 + 1e-9) + 1e-12, "{after} > {before}");
    }

    #[test]
    fn unobserved_error_never_exceeds_full_error(
        delta_forcing in -3.0..3.0f64,
        pts in prop::collection::vec(state(8), 1..12),
    ) {
        let truth = DynamicsModel::lorenz96(8).unwrap().with_substeps(10).unwrap();
        let sur = SurrogateModel::perturbed_forcing(&truth, delta_forcing).unwrap();
        let h = ObservationMatrix::selection(8, &[0, 1, 3, 4, 6, 7]).unwrap();
        let est = estimate_model_error(&truth, &sur, &pts, &h).unwrap();
        prop_assert!(est.delta_hat <= est.kappa_hat);
        prop_assert!(est.delta_hat >= 0.0);
    }

    #[test]
    fn model_error_grows_with_the_sample_set(
        pts in prop::collection::vec(state(8), 2..12),
        split in 1usize..11,
    ) {
        let truth = DynamicsModel::lorenz96(8).unwrap().with_substeps(10).unwrap();
        let sur = SurrogateModel::coarse_step(&truth, 2).unwrap();
        let h = ObservationMatrix::selection(8, &[0, 2, 4, 6]).unwrap();
        let split = split.min(pts.len() - 1);
        let part = estimate_model_error(&truth, &sur, &pts[..split], &h).unwrap();
        let all = estimate_model_error(&truth, &sur, &pts, &h).unwrap();
        prop_assert!(part.kappa_hat <= all.kappa_hat);
        prop_assert!(part.delta_hat <= all.delta_hat);
    }

    #[test]
    fn aggregate_ignores_trial_order(
        errors in prop::collection::vec(prop::collection::vec(0.0..10.0f64, 6), 2..8),
        rotate in 0usize..8,
    ) {
        let series: Vec<ErrorSeries> = errors
            .iter()
            .enumerate()
            .map(|(trial, e)| ErrorSeries {
                trial,
                records: e
                    .iter()
                    .enumerate()
                    .map(|(j, &error)| ErrorRecord {
                        step: j + 1,
                        time: (j + 1) as f64 * 0.1,
                        error,
                        cov_trace: 0.0,
                        observed_error: 0.0,
                    })
                    .collect(),
            })
            .collect();
        let mut shuffled = series.clone();
        shuffled.rotate_left(rotate % series.len());
        shuffled.reverse();
        prop_assert_eq!(aggregate(&series, 2).unwrap(), aggregate(&shuffled, 2).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn network_commutes_with_cyclic_shift(u in state(12), shift in 1usize..12, seed in any::<u64>()) {
        let w = NetworkWeights::conv_surrogate(12, 2, 3, 5, MergeRouting::Diagram, seed).unwrap();
        let shifted = DVector::from_fn(12, |i, _| u[(i + shift) % 12]);
        let a = nn_forward(&w, &u).unwrap();
        let b = nn_forward(&w, &shifted).unwrap();
        for i in 0..12 {
            prop_assert!((b[i] - a[(i + shift) % 12]).abs() <= 1e-9 * (1.0 + a.amax()));
        }
    }

    #[test]
    fn etkf_matches_kalman_moments(
        members in prop::collection::vec(-5.0..5.0f64, 6 * 20),
        y in prop::collection::vec(-5.0..5.0f64, 3),
        eps in 0.05..2.0f64,
    ) {
        let (d, n) = (6, 20);
        let h = ObservationMatrix::selection(d, &[0, 2, 5]).unwrap();
        let setup = ObservationSetup::with_identity_noise(h.clone(), eps, 0).unwrap();
        let cfg = FilterConfig {
            n_members: n,
            inflation: 0.0,
            mode: InflationMode::Stochastic,
            init_mean: DVector::zeros(d),
            init_cov: SymMatrix::identity(d),
            ball: BallSpec::unbounded(1.0, h.clone()),
            seed: 0,
        };
        let ens = Ensemble::new(DMatrix::from_vec(d, n, members), 1).unwrap();
        let moments = FilterMoments::from_ensemble(&ens, Normalization::Population);
        let y = DVector::from_vec(y);
        let analysis = analysis_etkf(&ens, &moments, &y, &setup, &cfg).unwrap();

        let hm = h.matrix();
        let sigma = moments.covariance().into_inner();
        let s = hm * &sigma * hm.transpose() + DMatrix::identity(3, 3) * (eps * eps);
        let gain = &sigma * hm.transpose() * s.try_inverse().unwrap();
        let mean = &moments.mean + &gain * (&y - hm * &moments.mean);
        let ikh = DMatrix::identity(d, d) - &gain * hm;
        let cov = &ikh * &sigma * ikh.transpose() + &gain * &gain.transpose() * (eps * eps);
        prop_assert!((&analysis.mean - &mean).norm() <= 1e-9 * (1.0 + mean.norm()));
        let c_a = analysis.ensemble.sample_cov().into_inner();
        prop_assert!((&c_a - &cov).norm() <= 1e-9 * (1.0 + cov.norm()));
    }
}
