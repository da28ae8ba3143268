//! Square-root ensemble Kalman filter with inflation `Q = aP` and
//! V-norm ball projection.
//!
//! The same code runs the filter with the true flow map or with a surrogate:
//! the forecast model is just a [`FlowMap`].
//!
//! Normalizations: the forecast covariance `Σ̂` uses `1/N` and the analysis
//! covariance `Ĉ` uses `1/(N-1)`. The ETKF transform carries the
//! `sqrt((N-1)/N)` factor that makes both
//! `m̂ = μ̂ + K(Σ̂)(y - Hμ̂)` and `Ĉ = (I - K(Σ̂)H)Σ̂` hold exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{project_ball_v, with_step, BallSpec, FlowMap};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{psd_pinv_pow, psd_sqrt, spd_inv_sqrt, sym_eig, sym_solve, StateVector, SymMatrix};
use crate::observe::ObservationSetup;
use crate::rng::{self, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflationMode {
    /// Each forecast member is perturbed by `ξ ~ N(0, aP)`.
    #[default]
    Stochastic,
    /// Members are propagated without noise and `aP` is added to `Σ̂` at
    /// analysis time.
    Deterministic,
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub n_members: usize,
    /// Inflation amplitude `a` in `Q = aP`.
    pub inflation: f64,
    pub mode: InflationMode,
    pub init_mean: StateVector,
    pub init_cov: SymMatrix,
    pub ball: BallSpec,
    pub seed: u64,
}

impl FilterConfig {
    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.n_members < 2 {
            return Err(Error::Config(format!(
                "ensemble size must be >= 2, got {}",
                self.n_members
            )));
        }
        if !(self.inflation >= 0.0 && self.inflation.is_finite()) {
            return Err(Error::Config(format!(
                "inflation must be finite and >= 0, got {}",
                self.inflation
            )));
        }
        check_dim("FilterConfig (init_cov)", self.init_mean.len(), self.init_cov.dim())?;
        check_dim("FilterConfig (ball)", self.init_mean.len(), self.ball.h.state_dim())?;
        static SMALL_ENSEMBLE: std::sync::Once = std::sync::Once::new();
        if self.n_members < 6 * obs_dim {
            SMALL_ENSEMBLE.call_once(|| log::warn!(
                "ensemble size {} is below 6k = {}; long-time accuracy guarantees assume N >= 6k",
                self.n_members,
                6 * obs_dim
            ));
        }
        Ok(())
    }
}

/// `N` members stored as the columns of a `d × N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: DMatrix<f64>,
    pub step: usize,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>, step: usize) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::Config("an ensemble needs at least 2 members".into()));
        }
        if !members.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp {
                step,
                context: "non-finite ensemble member".into(),
            });
        }
        Ok(Self { members, step })
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn mean(&self) -> StateVector {
        self.members.column_mean()
    }

    /// Deviations from the ensemble mean, one column per member.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut z = self.members.clone();
        for mut col in z.column_iter_mut() {
            col -= &mean;
        }
        z
    }

    /// Empirical covariance with `1/(N-1)` normalization.
    pub fn sample_cov(&self) -> SymMatrix {
        let z = self.anomalies();
        SymMatrix::symmetrize(&(&z * z.transpose() / (self.size() as f64 - 1.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `1/N`, used for the forecast covariance `Σ̂`.
    Population,
    /// `1/(N-1)`, used for the analysis covariance `Ĉ`.
    Sample,
}

#[derive(Debug, Clone)]
pub struct FilterMoments {
    pub mean: StateVector,
    pub anomalies: DMatrix<f64>,
    pub normalization: Normalization,
}

impl FilterMoments {
    pub fn from_ensemble(ens: &Ensemble, normalization: Normalization) -> Self {
        Self {
            mean: ens.mean(),
            anomalies: ens.anomalies(),
            normalization,
        }
    }

    fn divisor(&self) -> f64 {
        let n = self.anomalies.ncols() as f64;
        match self.normalization {
            Normalization::Population => n,
            Normalization::Sample => n - 1.0,
        }
    }

    pub fn covariance(&self) -> SymMatrix {
        let z = &self.anomalies;
        SymMatrix::symmetrize(&(z * z.transpose() / self.divisor()))
    }

    pub fn cov_trace(&self) -> f64 {
        self.anomalies.norm_squared() / self.divisor()
    }
}

/// `N` i.i.d. draws from `N(m₀, C₀)`.
pub fn init_ensemble(cfg: &FilterConfig) -> Result<Ensemble> {
    let d = cfg.init_mean.len();
    check_dim("init_ensemble", d, cfg.init_cov.dim())?;
    let root = psd_sqrt(&cfg.init_cov)?;
    let mut stream = rng::stream(cfg.seed, 0, Role::EnsembleInit, 0);
    let mut members = DMatrix::zeros(d, cfg.n_members);
    for mut col in members.column_iter_mut() {
        let z = rng::standard_normal(&mut stream, d);
        col.copy_from(&(&cfg.init_mean + root.as_matrix() * z));
    }
    Ensemble::new(members, 0)
}

/// Projects each member onto the ball, propagates it, and (stochastic mode)
/// adds `ξ = sqrt(a) H* z`, `z ~ N(0, I_k)`.
pub fn predict(
    ens: &Ensemble,
    model: &dyn FlowMap,
    cfg: &FilterConfig,
    step: usize,
) -> Result<(Ensemble, FilterMoments)> {
    check_dim("predict", model.dim(), ens.dim())?;
    let d = ens.dim();
    let k = cfg.ball.h.obs_dim();
    let mut out = DMatrix::zeros(d, ens.size());
    for (n, member) in ens.members.column_iter().enumerate() {
        let projected = project_ball_v(&member.clone_owned(), &cfg.ball)?;
        let forecast = model.flow(&projected).map_err(|e| with_step(e, step))?;
        out.set_column(n, &forecast);
    }
    if cfg.mode == InflationMode::Stochastic && cfg.inflation > 0.0 {
        let mut stream = rng::stream(cfg.seed, 0, Role::Inflation, step as u64);
        let scale = cfg.inflation.sqrt();
        for mut col in out.column_iter_mut() {
            let z = rng::standard_normal(&mut stream, k) * scale;
            col += cfg.ball.h.adjoint(&z);
        }
    }
    let forecast = Ensemble::new(out, step)?;
    let moments = FilterMoments::from_ensemble(&forecast, Normalization::Population);
    Ok((forecast, moments))
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub ensemble: Ensemble,
    pub mean: StateVector,
    /// `Tr(Ĉ)` with `1/(N-1)` normalization.
    pub cov_trace: f64,
}

/// A deterministic map from forecast to analysis ensemble.
pub trait AnalysisTransform {
    fn analyse(
        &self,
        forecast: &Ensemble,
        moments: &FilterMoments,
        y: &DVector<f64>,
        setup: &ObservationSetup,
        cfg: &FilterConfig,
    ) -> Result<Analysis>;
}

/// Ensemble transform Kalman filter with a symmetric transform.
#[derive(Debug, Clone, Copy, Default)]
pub struct Etkf;

impl AnalysisTransform for Etkf {
    fn analyse(
        &self,
        forecast: &Ensemble,
        moments: &FilterMoments,
        y: &DVector<f64>,
        setup: &ObservationSetup,
        cfg: &FilterConfig,
    ) -> Result<Analysis> {
        analysis_etkf(forecast, moments, y, setup, cfg)
    }
}

/// ETKF analysis.
///
/// With `G = HZ/√N` and `D = GGᵀ + ε²R` the transform is
/// `T = (I - GᵀD⁻¹G)^{1/2} = (I + Gᵀ(ε²R)⁻¹G)^{-1/2}`, evaluated through the
/// `k × k` eigenproblem of `D^{-1/2}GGᵀD^{-1/2}` so no `N × N` matrix is
/// formed. The analysis anomalies are `sqrt((N-1)/N) Z T`.
pub fn analysis_etkf(
    forecast: &Ensemble,
    moments: &FilterMoments,
    y: &DVector<f64>,
    setup: &ObservationSetup,
    cfg: &FilterConfig,
) -> Result<Analysis> {
    let n = forecast.size();
    let d = forecast.dim();
    let k = setup.obs_dim();
    check_dim("analysis_etkf (y)", k, y.len())?;
    check_dim("analysis_etkf (H)", d, setup.h.state_dim())?;
    if moments.normalization != Normalization::Population {
        return Err(Error::Config("forecast moments must use 1/N normalization".into()));
    }
    let nf = n as f64;
    let z = &moments.anomalies;
    let g = setup.h.apply_cols(z) / nf.sqrt();
    let innovation = y - setup.h.apply(&moments.mean);
    let eps2 = setup.eps * setup.eps;

    let (mean, z_a) = match cfg.mode {
        InflationMode::Stochastic => {
            let d_mat = SymMatrix::symmetrize(&(&g * g.transpose() + setup.r.as_matrix() * eps2));
            let innovation = DMatrix::from_column_slice(k, 1, innovation.as_slice());
            // noiseless data: D may be singular once the ensemble has collapsed
            // onto the data; fall back to the pseudo-inverse
            let (solved, d_inv_sqrt) = if eps2 > 0.0 {
                (sym_solve(&d_mat, &innovation)?, spd_inv_sqrt(&d_mat)?)
            } else {
                (psd_pinv_pow(&d_mat, -1.0)?.as_matrix() * &innovation, psd_pinv_pow(&d_mat, -0.5)?)
            };
            let weights = g.tr_mul(&solved) / nf.sqrt();
            let mean = &moments.mean + z * weights;

            let whitened = d_inv_sqrt.as_matrix() * &g;
            let m = SymMatrix::symmetrize(&(&whitened * whitened.transpose()));
            let eig = sym_eig(&m)?;
            let b = eig.vectors.tr_mul(&whitened);
            // (sqrt(1-λ) - 1)/λ, written to stay finite at λ = 0
            let f = eig.values.map(|l| -1.0 / ((1.0 - l.clamp(0.0, 1.0)).sqrt() + 1.0));
            let mut fb = b.clone();
            for (i, mut row) in fb.row_iter_mut().enumerate() {
                row *= f[i];
            }
            let zt = z + (z * b.transpose()) * fb;
            (mean, zt * ((nf - 1.0) / nf).sqrt())
        }
        InflationMode::Deterministic => {
            // Σ̃ = Σ̂ + aP; HΣ̃H* = GGᵀ + aI.
            let a = cfg.inflation;
            let d_mat = SymMatrix::symmetrize(
                &(&g * g.transpose() + DMatrix::identity(k, k) * a + setup.r.as_matrix() * eps2),
            );
            // Kᵀ = D⁻¹ H Σ̃ = D⁻¹ (G Zᵀ/√N + a H)
            let h_sigma = &g * z.transpose() / nf.sqrt() + setup.h.matrix() * a;
            let gain = if a + eps2 > 0.0 {
                sym_solve(&d_mat, &h_sigma)?
            } else {
                psd_pinv_pow(&d_mat, -1.0)?.as_matrix() * &h_sigma
            }
            .transpose();
            let mean = &moments.mean + &gain * &innovation;
            let z_a = (z - &gain * setup.h.apply_cols(z)) * ((nf - 1.0) / nf).sqrt();
            (mean, z_a)
        }
    };

    let mut members = z_a.clone();
    for mut col in members.column_iter_mut() {
        col += &mean;
    }
    let cov_trace = z_a.norm_squared() / (nf - 1.0);
    Ok(Analysis {
        ensemble: Ensemble::new(members, forecast.step)?,
        mean,
        cov_trace,
    })
}

/// Per-step filter output.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mean: StateVector,
    pub cov_trace: f64,
    /// `|m̂_j - u_j|` when the truth is known.
    pub error: Option<f64>,
    /// `|H(m̂_j - u_j)|` when the truth is known.
    pub observed_error: Option<f64>,
}

/// One predict/analysis cycle assimilating `y` (the observation at `step`).
#[allow(clippy::too_many_arguments)]
pub fn filter_step_with(
    transform: &dyn AnalysisTransform,
    ens: &Ensemble,
    model: &dyn FlowMap,
    y: &DVector<f64>,
    setup: &ObservationSetup,
    cfg: &FilterConfig,
    step: usize,
    truth: Option<&StateVector>,
) -> Result<(Ensemble, StepRecord)> {
    let (forecast, moments) = predict(ens, model, cfg, step)?;
    let analysis = transform.analyse(&forecast, &moments, y, setup, cfg)?;
    let (error, observed_error) = match truth {
        Some(u) => {
            let diff = &analysis.mean - u;
            (Some(diff.norm()), Some(setup.h.apply(&diff).norm()))
        }
        None => (None, None),
    };
    let record = StepRecord {
        step,
        mean: analysis.mean,
        cov_trace: analysis.cov_trace,
        error,
        observed_error,
    };
    Ok((analysis.ensemble, record))
}

/// [`filter_step_with`] using the ETKF transform.
pub fn filter_step(
    ens: &Ensemble,
    model: &dyn FlowMap,
    y: &DVector<f64>,
    setup: &ObservationSetup,
    cfg: &FilterConfig,
    step: usize,
    truth: Option<&StateVector>,
) -> Result<(Ensemble, StepRecord)> {
    filter_step_with(&Etkf, ens, model, y, setup, cfg, step, truth)
}

/// Runs the filter over `observations[j-1] = y_j`, `j = 1..`.
pub fn run_filter(
    model: &dyn FlowMap,
    setup: &ObservationSetup,
    cfg: &FilterConfig,
    observations: &[DVector<f64>],
    truth: Option<&[StateVector]>,
) -> Result<Vec<StepRecord>> {
    cfg.validate(setup.obs_dim())?;
    let mut ens = init_ensemble(cfg)?;
    let mut records = Vec::with_capacity(observations.len());
    for (i, y) in observations.iter().enumerate() {
        let step = i + 1;
        let u = truth.map(|t| &t[i]);
        let (next, record) = filter_step(&ens, model, y, setup, cfg, step, u)?;
        ens = next;
        records.push(record);
    }
    Ok(records)
}
