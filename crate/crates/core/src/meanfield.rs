//! Gaussian projected (mean-field) filter.
//!
//! The prediction moments `E[Ψ(P_B u)]` and `Cov[Ψ(P_B u)]` under
//! `u ~ N(m, C)` are estimated by plain Monte Carlo. Samples are generated
//! in fixed-size blocks, each with its own keyed stream, so the result does
//! not depend on how many threads evaluate them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{project_ball_v, with_step, BallSpec, FlowMap};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{clamp_psd, kalman_gain, psd_sqrt, StateVector, SymMatrix};
use crate::observe::ObservationSetup;
use crate::rng::{self, Role};

const SAMPLE_BLOCK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: StateVector,
    pub cov: SymMatrix,
}

impl GaussianState {
    pub fn new(mean: StateVector, cov: SymMatrix) -> Result<Self> {
        check_dim("GaussianState", mean.len(), cov.dim())?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Monte Carlo prediction step. `step` keys the sample stream.
pub fn mf_predict(
    g: &GaussianState,
    model: &dyn FlowMap,
    ball: &BallSpec,
    n_mc: usize,
    seed: u64,
    step: usize,
) -> Result<GaussianState> {
    if n_mc < 2 {
        return Err(Error::Config(format!("need at least 2 Monte Carlo samples, got {n_mc}")));
    }
    let d = g.dim();
    check_dim("mf_predict", model.dim(), d)?;
    let root = psd_sqrt(&g.cov)?;
    let blocks = n_mc.div_ceil(SAMPLE_BLOCK);

    let outputs: Vec<DMatrix<f64>> = (0..blocks)
        .into_par_iter()
        .map(|block| {
            let count = SAMPLE_BLOCK.min(n_mc - block * SAMPLE_BLOCK);
            let mut stream = rng::stream(seed, block as u64, Role::MeanFieldSamples, step as u64);
            let mut out = DMatrix::zeros(d, count);
            for i in 0..count {
                let z = rng::standard_normal(&mut stream, d);
                let u = &g.mean + root.as_matrix() * z;
                let v = model.flow(&project_ball_v(&u, ball)?).map_err(|e| with_step(e, step))?;
                out.set_column(i, &v);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut mean = DVector::zeros(d);
    for block in &outputs {
        for col in block.column_iter() {
            mean += col;
        }
    }
    mean /= n_mc as f64;
    let mut cov = DMatrix::zeros(d, d);
    for block in &outputs {
        let mut centred = block.clone();
        for mut col in centred.column_iter_mut() {
            col -= &mean;
        }
        cov += &centred * centred.transpose();
    }
    cov /= (n_mc - 1) as f64;
    GaussianState::new(mean, SymMatrix::symmetrize(&cov))
}

/// Kalman update of `N(μ, Σ + aP)` with `y`.
pub fn mf_analysis(
    pred: &GaussianState,
    inflation: f64,
    y: &DVector<f64>,
    setup: &ObservationSetup,
) -> Result<GaussianState> {
    check_dim("mf_analysis (y)", setup.obs_dim(), y.len())?;
    let d = pred.dim();
    let q = SymMatrix::symmetrize(&(setup.h.projector() * inflation));
    let prior = &pred.cov + &q;
    let gain = kalman_gain(&prior, &setup.h, setup.eps, &setup.r)?;
    let mean = &pred.mean + &gain * (y - setup.h.apply(&pred.mean));
    let kh = &gain * setup.h.matrix();
    let cov = (DMatrix::identity(d, d) - kh) * prior.as_matrix();
    let cov = clamp_psd(&SymMatrix::symmetrize(&cov))?;
    GaussianState::new(mean, cov)
}

#[derive(Debug, Clone)]
pub struct MeanFieldConfig {
    pub inflation: f64,
    pub n_mc: usize,
    pub ball: BallSpec,
    pub init: GaussianState,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MeanFieldRecord {
    pub step: usize,
    pub state: GaussianState,
    pub cov_trace: f64,
    pub error: Option<f64>,
    pub observed_error: Option<f64>,
}

/// Alternates [`mf_predict`] and [`mf_analysis`] over
/// `observations[j-1] = y_j`.
pub fn mf_filter_run(
    cfg: &MeanFieldConfig,
    model: &dyn FlowMap,
    setup: &ObservationSetup,
    observations: &[DVector<f64>],
    truth: Option<&[StateVector]>,
) -> Result<Vec<MeanFieldRecord>> {
    let mut state = cfg.init.clone();
    let mut records = Vec::with_capacity(observations.len());
    for (i, y) in observations.iter().enumerate() {
        let step = i + 1;
        let pred = mf_predict(&state, model, &cfg.ball, cfg.n_mc, cfg.seed, step)?;
        state = mf_analysis(&pred, cfg.inflation, y, setup)?;
        let (error, observed_error) = match truth {
            Some(t) => {
                let diff = &state.mean - &t[i];
                (Some(diff.norm()), Some(setup.h.apply(&diff).norm()))
            }
            None => (None, None),
        };
        records.push(MeanFieldRecord {
            step,
            cov_trace: state.cov.trace(),
            state: state.clone(),
            error,
            observed_error,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearMap;
    use crate::linalg::ObservationMatrix;
    use approx::assert_abs_diff_eq;

    fn linear_map() -> LinearMap {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        LinearMap::new(a, DVector::from_vec(vec![0.5, -0.2])).unwrap()
    }

    #[test]
    fn point_mass_prediction() {
        let h = ObservationMatrix::selection(2, &[0]).unwrap();
        let ball = BallSpec::new(1.0, 1.0, h).unwrap();
        let g = GaussianState::new(DVector::from_vec(vec![3.0, 0.0]), SymMatrix::zeros(2)).unwrap();
        let map = linear_map();
        let pred = mf_predict(&g, &map, &ball, 100, 1, 1).unwrap();
        let expected = map.flow(&project_ball_v(&g.mean, &ball).unwrap()).unwrap();
        assert!((pred.mean - expected).amax() < 1e-13);
        assert!(pred.cov.max_abs() < 1e-25);
    }

    #[test]
    fn linear_gaussian_moments() {
        let h = ObservationMatrix::selection(2, &[0]).unwrap();
        let ball = BallSpec::unbounded(1.0, h);
        let cov = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])).unwrap();
        let g = GaussianState::new(DVector::from_vec(vec![1.0, -1.0]), cov.clone()).unwrap();
        let map = linear_map();
        let n_mc = 200_000;
        let pred = mf_predict(&g, &map, &ball, n_mc, 4, 1).unwrap();
        let exact_mean = map.flow(&g.mean).unwrap();
        let exact_cov = &map.matrix * cov.as_matrix() * map.matrix.transpose();
        // a few standard errors
        let se = (exact_cov.trace() / n_mc as f64).sqrt();
        assert!((pred.mean - exact_mean).norm() < 5.0 * se);
        let rel = (pred.cov.as_matrix() - &exact_cov).norm() / exact_cov.norm();
        assert!(rel < 0.02, "rel {rel}");
    }

    #[test]
    fn standard_error_halves_when_samples_quadruple() {
        // error in the mean ~ 1/sqrt(n): quadrupling n halves it, so doubling
        // n shrinks it by sqrt(2)
        let h = ObservationMatrix::selection(2, &[0]).unwrap();
        let ball = BallSpec::unbounded(1.0, h);
        let g = GaussianState::new(DVector::zeros(2), SymMatrix::identity(2)).unwrap();
        let map = linear_map();
        let exact = map.flow(&g.mean).unwrap();
        let rms = |n: usize| {
            let total: f64 = (0..20)
                .map(|seed| (mf_predict(&g, &map, &ball, n, seed, 1).unwrap().mean - &exact).norm_squared())
                .sum();
            (total / 20.0).sqrt()
        };
        let ratio = rms(1000) / rms(4000);
        assert!((1.4..2.8).contains(&ratio), "ratio {ratio}");
        let ratio2 = rms(1000) / rms(2000);
        assert!((1.0..2.0).contains(&ratio2), "ratio {ratio2}");
    }

    #[test]
    fn prediction_is_seed_deterministic() {
        let h = ObservationMatrix::selection(2, &[0]).unwrap();
        let ball = BallSpec::unbounded(1.0, h);
        let g = GaussianState::new(DVector::zeros(2), SymMatrix::identity(2)).unwrap();
        let a = mf_predict(&g, &linear_map(), &ball, 1500, 3, 2).unwrap();
        let b = mf_predict(&g, &linear_map(), &ball, 1500, 3, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn analysis_scalar_inflation_only() {
        // Σ = 0, Q = a: c = a ε² r / (a + ε² r)
        let h = ObservationMatrix::identity(1);
        let (a, eps, r) = (2.0, 0.5, 3.0);
        let setup = ObservationSetup::new(h, SymMatrix::from_diagonal(&[r]), eps, 0).unwrap();
        let pred = GaussianState::new(DVector::from_element(1, 1.0), SymMatrix::zeros(1)).unwrap();
        let post = mf_analysis(&pred, a, &DVector::from_element(1, 2.0), &setup).unwrap();
        let noise = eps * eps * r;
        assert_abs_diff_eq!(post.cov.trace(), a * noise / (a + noise), epsilon = 1e-14);
        assert_abs_diff_eq!(post.mean[0], 1.0 + a / (a + noise), epsilon = 1e-14);
    }

    #[test]
    fn analysis_uninformative_data() {
        let h = ObservationMatrix::selection(2, &[0]).unwrap();
        let setup = ObservationSetup::with_identity_noise(h.clone(), 1e8, 0).unwrap();
        let cov = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])).unwrap();
        let pred = GaussianState::new(DVector::from_vec(vec![1.0, 2.0]), cov.clone()).unwrap();
        let post = mf_analysis(&pred, 0.5, &DVector::from_element(1, 100.0), &setup).unwrap();
        assert!((post.mean - &pred.mean).amax() < 1e-12);
        let expected = cov.as_matrix() + h.projector() * 0.5;
        assert!((post.cov.as_matrix() - expected).amax() < 1e-12);
    }

    #[test]
    fn analysis_two_by_two_hand_case() {
        // Σ + Q = [[2, 0.5], [0.5, 1]], H = [1 0], ε²R = 1
        // S = 3, K = (2/3, 1/6)
        let h = ObservationMatrix::selection(2, &[0]).unwrap();
        let setup = ObservationSetup::with_identity_noise(h, 1.0, 0).unwrap();
        let cov = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let pred = GaussianState::new(DVector::from_vec(vec![0.0, 1.0]), cov).unwrap();
        let post = mf_analysis(&pred, 1.0, &DVector::from_element(1, 3.0), &setup).unwrap();
        assert_abs_diff_eq!(post.mean[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(post.mean[1], 1.5, epsilon = 1e-12);
        // C = (I - KH)(Σ+Q) = [[2/3, 1/6], [1/6, 1 - 1/12]]
        let expected = DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 11.0 / 12.0]);
        assert!((post.cov.as_matrix() - expected).amax() < 1e-12);
        // observed block bounded by ε² Tr R
        assert!(post.cov.as_matrix()[(0, 0)] <= 1.0);
    }

    #[test]
    fn surrogate_path_equals_truth_path() {
        let h = ObservationMatrix::selection(2, &[0]).unwrap();
        let setup = ObservationSetup::with_identity_noise(h.clone(), 0.1, 5).unwrap();
        let cfg = MeanFieldConfig {
            inflation: 0.5,
            n_mc: 600,
            ball: BallSpec::unbounded(1.0, h),
            init: GaussianState::new(DVector::zeros(2), SymMatrix::identity(2)).unwrap(),
            seed: 2,
        };
        let obs: Vec<_> = (0..5).map(|i| DVector::from_element(1, i as f64 * 0.1)).collect();
        let map = linear_map();
        let same = map.clone();
        let a = mf_filter_run(&cfg, &map, &setup, &obs, None).unwrap();
        let b = mf_filter_run(&cfg, &same, &setup, &obs, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.state, y.state);
        }
    }
}
