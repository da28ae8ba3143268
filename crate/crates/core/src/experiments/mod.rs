//! Twin experiments: truth runs, Monte Carlo filter trials, aggregate error
//! statistics, the noise-scaling and surrogate studies, and the empirical
//! squeezing constant.
//!
//! Every random draw is keyed by `(seed, trial, role, step)`, so a trial is
//! a pure function of the configuration and its index, and trials can run in
//! any order on any number of threads.

pub mod config;
mod output;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::{estimate_ball_radius, with_step, BallSpec, DynamicsModel, FlowMap};
use crate::enkf::{run_filter, FilterConfig};
use crate::error::{Error, Result};
use crate::linalg::{ObservationMatrix, StateVector, SymMatrix};
use crate::meanfield::{mf_filter_run, GaussianState, MeanFieldConfig};
use crate::observe::{gen_observation, ObservationSetup};
use crate::rng::{self, Role};
use crate::surrogate::{estimate_model_error, sample_attractor, ModelErrorEstimate, SurrogateModel};

pub use config::{
    SurrogateSection,
    steps_for, EpsSpec, ExperimentConfig, ExperimentKind, FilterMethod, FilterSpec, ModelSpec, OperatorSpec,
    SurrogateSpec,
};
pub use output::{
    emit_training_data, read_training_data, run_experiment, write_aggregate_csv, write_series_csv, write_states_csv,
    ExperimentOutput,
};

const BALL_TAG: u64 = 0x6261_6c6c;
const ATTRACTOR_TAG: u64 = 0x6174_7472;

/// A configuration resolved for one noise level.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: DynamicsModel,
    pub setup: ObservationSetup,
    pub filter: FilterSpec,
    pub ball: BallSpec,
    pub steps: usize,
    pub burn_in_steps: usize,
    pub truth_init_var: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn new(cfg: &ExperimentConfig, eps: f64) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model.build()?;
        let d = model.system.dim();
        let h = cfg.observation.operator.build(d)?;
        let r = SymMatrix::identity(h.obs_dim()).scaled(cfg.observation.noise_var);
        let setup = ObservationSetup::new(h.clone(), r, eps, 0)?;
        let seed = cfg.experiment.seed;
        let ball = if cfg.filter.project {
            let radius = match cfg.filter.ball_radius {
                Some(r) => r,
                None => estimate_ball_radius(&model, 1000.0 * model.dt_obs, rng::derive_seed(seed, BALL_TAG))?,
            };
            BallSpec::new(radius, cfg.filter.beta, h)?
        } else {
            BallSpec::unbounded(cfg.filter.beta, h)
        };
        Ok(Self {
            steps: steps_for(cfg.experiment.horizon, model.dt_obs)?,
            burn_in_steps: steps_for(cfg.experiment.burn_in, model.dt_obs)?,
            model,
            setup,
            filter: cfg.filter.clone(),
            ball,
            truth_init_var: cfg.experiment.truth_init_var,
            seed,
        })
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Ok(Self {
            setup: self.setup.with_eps(eps)?,
            ..self.clone()
        })
    }

    fn trial_seed(&self, trial: usize) -> u64 {
        rng::derive_seed(self.seed, trial as u64)
    }

    /// Observation setup carrying this trial's noise stream.
    pub fn trial_setup(&self, trial: usize) -> ObservationSetup {
        self.setup.with_seed(rng::derive_seed(self.trial_seed(trial), 1))
    }

    fn filter_seed(&self, trial: usize) -> u64 {
        rng::derive_seed(self.trial_seed(trial), 2)
    }

    /// `u₀ ~ N(0, truth_init_var I)` for this trial.
    pub fn truth_initial(&self, trial: usize) -> StateVector {
        let mut stream = rng::stream(self.seed, trial as u64, Role::TruthInit, 0);
        rng::standard_normal(&mut stream, self.model.system.dim()) * self.truth_init_var.sqrt()
    }

    /// Truth `u_1..u_n` and observations `y_1..y_n`.
    pub fn generate_truth(&self, trial: usize, steps: usize) -> Result<(Vec<StateVector>, Vec<DVector<f64>>)> {
        let setup = self.trial_setup(trial);
        let mut u = self.truth_initial(trial);
        let mut truth = Vec::with_capacity(steps);
        let mut obs = Vec::with_capacity(steps);
        for j in 1..=steps {
            u = self.model.flow(&u).map_err(|e| with_step(e, j))?;
            obs.push(gen_observation(&setup, &u, j)?);
            truth.push(u.clone());
        }
        Ok((truth, obs))
    }

    pub fn filter_config(&self, trial: usize) -> FilterConfig {
        let d = self.model.system.dim();
        FilterConfig {
            n_members: self.filter.n_members,
            inflation: self.filter.inflation,
            mode: self.filter.mode,
            init_mean: DVector::zeros(d),
            init_cov: SymMatrix::identity(d).scaled(self.filter.init_var),
            ball: self.ball.clone(),
            seed: self.filter_seed(trial),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord {
    pub step: usize,
    pub time: f64,
    /// `‖m̂_j − u_j‖`
    pub error: f64,
    pub cov_trace: f64,
    /// `‖H(m̂_j − u_j)‖`
    pub observed_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    pub trial: usize,
    pub records: Vec<ErrorRecord>,
}

/// One twin experiment: truth, observations and the configured filter with
/// `forecast` as its forecast model.
pub fn run_trial(scenario: &Scenario, forecast: &dyn FlowMap, trial: usize) -> Result<ErrorSeries> {
    let (truth, obs) = scenario.generate_truth(trial, scenario.steps)?;
    let setup = scenario.trial_setup(trial);
    let dt = scenario.model.dt_obs;
    let records = match scenario.filter.method {
        FilterMethod::Enkf => run_filter(forecast, &setup, &scenario.filter_config(trial), &obs, Some(&truth))?
            .into_iter()
            .map(|r| ErrorRecord {
                step: r.step,
                time: r.step as f64 * dt,
                error: r.error.unwrap_or(f64::NAN),
                cov_trace: r.cov_trace,
                observed_error: r.observed_error.unwrap_or(f64::NAN),
            })
            .collect(),
        FilterMethod::MeanField => {
            let d = scenario.model.system.dim();
            let cfg = MeanFieldConfig {
                inflation: scenario.filter.inflation,
                n_mc: scenario.filter.n_mc,
                ball: scenario.ball.clone(),
                init: GaussianState::new(DVector::zeros(d), SymMatrix::identity(d).scaled(scenario.filter.init_var))?,
                seed: scenario.filter_seed(trial),
            };
            mf_filter_run(&cfg, forecast, &setup, &obs, Some(&truth))?
                .into_iter()
                .map(|r| ErrorRecord {
                    step: r.step,
                    time: r.step as f64 * dt,
                    error: r.error.unwrap_or(f64::NAN),
                    cov_trace: r.cov_trace,
                    observed_error: r.observed_error.unwrap_or(f64::NAN),
                })
                .collect()
        }
    };
    Ok(ErrorSeries { trial, records })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateRow {
    pub step: usize,
    pub time: f64,
    pub mean_error: f64,
    pub stderr: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateStats {
    pub rows: Vec<AggregateRow>,
    /// Mean over trials of each trial's time-averaged error on `[burn-in, T]`.
    pub steady_state_mean: f64,
    pub steady_state_stderr: f64,
    pub trials: usize,
}

/// Mean and standard error, summed in sorted order so the result does not
/// depend on the order of `values`.
fn mean_stderr(values: &mut [f64]) -> (f64, f64) {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-step mean error with a two-standard-error band, plus the steady-state
/// average over steps `burn_in_steps..`.
pub fn aggregate(series: &[ErrorSeries], burn_in_steps: usize) -> Result<AggregateStats> {
    let first = series
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate zero trials".into()))?;
    let n_steps = first.records.len();
    if series.iter().any(|s| s.records.len() != n_steps) {
        return Err(Error::Config("trials have different lengths".into()));
    }
    if burn_in_steps >= n_steps {
        return Err(Error::Config("burn-in covers the whole horizon".into()));
    }
    let rows = (0..n_steps)
        .map(|j| {
            let mut vals: Vec<f64> = series.iter().map(|s| s.records[j].error).collect();
            let (mean, se) = mean_stderr(&mut vals);
            let r = &first.records[j];
            AggregateRow {
                step: r.step,
                time: r.time,
                mean_error: mean,
                stderr: se,
                band_lo: (mean - 2.0 * se).max(0.0),
                band_hi: mean + 2.0 * se,
            }
        })
        .collect();
    let mut steady: Vec<f64> = series
        .iter()
        .map(|s| {
            let window = &s.records[burn_in_steps..];
            window.iter().map(|r| r.error).sum::<f64>() / window.len() as f64
        })
        .collect();
    let (steady_state_mean, steady_state_stderr) = mean_stderr(&mut steady);
    Ok(AggregateStats {
        rows,
        steady_state_mean,
        steady_state_stderr,
        trials: series.len(),
    })
}

#[derive(Debug, Clone)]
pub struct MonteCarlo {
    pub series: Vec<ErrorSeries>,
    pub stats: AggregateStats,
}

/// Runs `trials` independent trials in parallel and aggregates them.
pub fn run_monte_carlo(scenario: &Scenario, forecast: &dyn FlowMap, trials: usize) -> Result<MonteCarlo> {
    let series: Result<Vec<ErrorSeries>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            run_trial(scenario, forecast, trial).map_err(|e| Error::Trial {
                trial,
                source: Box::new(e),
            })
        })
        .collect();
    let series = series?;
    let stats = aggregate(&series, scenario.burn_in_steps)?;
    Ok(MonteCarlo { series, stats })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("a log-log fit needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Config("a log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("a log-log fit needs distinct noise levels".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone)]
pub struct NoiseLevel {
    pub eps: f64,
    pub result: MonteCarlo,
}

#[derive(Debug, Clone)]
pub struct NoiseScaling {
    /// In configuration order.
    pub levels: Vec<NoiseLevel>,
    /// Log-log slope of steady-state error against ε over the three smallest
    /// levels (all levels if fewer than three).
    pub slope: f64,
}

pub fn noise_scaling_experiment(cfg: &ExperimentConfig) -> Result<NoiseScaling> {
    let eps = cfg.observation.eps.values();
    if eps.len() < 2 {
        return Err(Error::Config("noise scaling needs at least two noise levels".into()));
    }
    let base = Scenario::new(cfg, eps[0])?;
    let levels = eps
        .iter()
        .map(|&e| {
            let scenario = base.with_eps(e)?;
            let result = run_monte_carlo(&scenario, &scenario.model, cfg.experiment.trials)?;
            log::info!("ε = {e:e}: steady-state error {:.4e}", result.stats.steady_state_mean);
            Ok(NoiseLevel { eps: e, result })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pts: Vec<(f64, f64)> = levels
        .iter()
        .map(|l| (l.eps, l.result.stats.steady_state_mean))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.truncate(3);
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let slope = loglog_slope(&x, &y)?;
    Ok(NoiseScaling { levels, slope })
}

#[derive(Debug, Clone)]
pub struct SurrogateRow {
    pub label: String,
    pub estimate: ModelErrorEstimate,
    pub result: MonteCarlo,
    /// Mean over trials of `‖(Ψ^s)^j(u₀) − Ψ^j(u₀)‖`, `j = 1..`.
    pub open_loop: Vec<f64>,
    /// First time the mean open-loop error exceeds half the attractor RMS.
    pub divergence_time: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SurrogateStudy {
    pub eps: f64,
    /// `sqrt(mean ‖u‖²)` over the attractor samples.
    pub attractor_rms: f64,
    /// The filter with the true model.
    pub reference: MonteCarlo,
    pub rows: Vec<SurrogateRow>,
}

/// Mean open-loop surrogate divergence from each trial's true initial
/// condition. A surrogate trajectory that blows up counts as infinitely far.
pub fn open_loop_divergence(
    scenario: &Scenario,
    surrogate: &dyn FlowMap,
    trials: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let per_trial: Result<Vec<Vec<f64>>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut u = scenario.truth_initial(trial);
            let mut v = Some(u.clone());
            let mut out = Vec::with_capacity(steps);
            for j in 1..=steps {
                u = scenario.model.flow(&u).map_err(|e| with_step(e, j))?;
                v = v.and_then(|x| surrogate.flow(&x).ok());
                out.push(v.as_ref().map_or(f64::INFINITY, |x| (x - &u).norm()));
            }
            Ok(out)
        })
        .collect();
    let per_trial = per_trial?;
    Ok((0..steps)
        .map(|j| {
            let mut vals: Vec<f64> = per_trial.iter().map(|t| t[j]).collect();
            mean_stderr(&mut vals).0
        })
        .collect())
}

pub fn surrogate_experiment(cfg: &ExperimentConfig) -> Result<SurrogateStudy> {
    let section = cfg
        .surrogate
        .as_ref()
        .filter(|s| !s.models.is_empty())
        .ok_or_else(|| Error::Config("surrogate experiment needs [[surrogate.models]]".into()))?;
    let eps = cfg.observation.eps.values()[0];
    let scenario = Scenario::new(cfg, eps)?;
    let seed = cfg.experiment.seed;
    let samples = attractor_samples(&scenario, section)?;
    let attractor_rms = (samples.iter().map(|u| u.norm_squared()).sum::<f64>() / samples.len() as f64).sqrt();
    let trials = cfg.experiment.trials;
    let reference = run_monte_carlo(&scenario, &scenario.model, trials)?;
    let open_steps = steps_for(section.open_loop_horizon, scenario.model.dt_obs)?;
    let dt = scenario.model.dt_obs;

    let mut rows = Vec::with_capacity(section.models.len());
    for (i, spec) in section.models.iter().enumerate() {
        let surrogate: SurrogateModel = spec.build(&scenario.model, rng::derive_seed(seed, 100 + i as u64))?;
        let label = surrogate.label();
        let estimate = estimate_model_error(&scenario.model, &surrogate, &samples, &scenario.setup.h)?;
        let result = run_monte_carlo(&scenario, &surrogate, trials)?;
        let open_loop = open_loop_divergence(&scenario, &surrogate, trials, open_steps)?;
        let divergence_time = open_loop
            .iter()
            .position(|&e| e > 0.5 * attractor_rms)
            .map(|j| (j + 1) as f64 * dt);
        log::info!(
            "{label}: δ̂ = {:.3e}, steady-state error {:.4e}",
            estimate.delta_hat,
            result.stats.steady_state_mean
        );
        rows.push(SurrogateRow {
            label,
            estimate,
            result,
            open_loop,
            divergence_time,
        });
    }
    Ok(SurrogateStudy {
        eps,
        attractor_rms,
        reference,
        rows,
    })
}

/// The attractor points used for `(κ̂, δ̂)` in a surrogate study.
pub fn attractor_samples(scenario: &Scenario, section: &SurrogateSection) -> Result<Vec<StateVector>> {
    sample_attractor(
        &scenario.model,
        section.samples,
        section.sample_burn_in,
        section.sample_stride,
        rng::derive_seed(scenario.seed, ATTRACTOR_TAG),
    )
}

/// `(label, κ̂, δ̂)` for every configured surrogate, on the same attractor
/// samples [`surrogate_experiment`] uses.
pub fn surrogate_errors(cfg: &ExperimentConfig) -> Result<Vec<(String, ModelErrorEstimate)>> {
    let section = cfg
        .surrogate
        .as_ref()
        .filter(|s| !s.models.is_empty())
        .ok_or_else(|| Error::Config("no [[surrogate.models]] configured".into()))?;
    let scenario = Scenario::new(cfg, cfg.observation.eps.values()[0])?;
    let samples = attractor_samples(&scenario, section)?;
    section
        .models
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let s = spec.build(&scenario.model, rng::derive_seed(scenario.seed, 100 + i as u64))?;
            let est = estimate_model_error(&scenario.model, &s, &samples, &scenario.setup.h)?;
            Ok((s.label(), est))
        })
        .collect()
}

/// Mean-field (Gaussian projected) filter Monte Carlo; the filter method in
/// `cfg` must be `mean_field`.
pub fn mean_field_experiment(cfg: &ExperimentConfig) -> Result<MonteCarlo> {
    if cfg.filter.method != FilterMethod::MeanField {
        return Err(Error::Config("mean-field experiment needs filter.method = \"mean_field\"".into()));
    }
    let scenario = Scenario::new(cfg, cfg.observation.eps.values()[0])?;
    run_monte_carlo(&scenario, &scenario.model, cfg.experiment.trials)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaOptions {
    pub beta: f64,
    /// Independent trajectories the sample points are drawn from.
    pub chains: usize,
    pub burn_in: usize,
    pub stride: usize,
}

impl Default for AlphaOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            chains: 4,
            burn_in: 1000,
            stride: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaEstimate {
    pub alpha_hat: f64,
    /// Pairs with `V(u − v) > 0` that entered the maximum.
    pub pairs_used: usize,
}

impl AlphaEstimate {
    pub fn is_contractive(&self) -> bool {
        self.alpha_hat < 1.0
    }
}

/// Empirical squeezing constant: the largest
/// `V²((I−P)(Ψ(u)−Ψ(v))) / V²(u−v)` over `n_pairs` random pairs of attractor
/// points, `V²(w) = |w|² + β|Pw|²`. This is a lower estimate of the true
/// supremum; values `>= 1` are reported as they are.
pub fn estimate_alpha(model: &dyn FlowMap, h: &ObservationMatrix, n_pairs: usize, seed: u64) -> Result<AlphaEstimate> {
    estimate_alpha_with(model, h, n_pairs, seed, AlphaOptions::default())
}

pub fn estimate_alpha_with(
    model: &dyn FlowMap,
    h: &ObservationMatrix,
    n_pairs: usize,
    seed: u64,
    opts: AlphaOptions,
) -> Result<AlphaEstimate> {
    if n_pairs < 100 {
        return Err(Error::Config(format!("estimate_alpha needs >= 100 pairs, got {n_pairs}")));
    }
    if opts.chains == 0 {
        return Err(Error::Config("estimate_alpha needs at least one chain".into()));
    }
    let per_chain = n_pairs.div_ceil(opts.chains).max(2);
    let chains: Result<Vec<Vec<StateVector>>> = (0..opts.chains)
        .into_par_iter()
        .map(|c| sample_attractor(model, per_chain, opts.burn_in, opts.stride, rng::derive_seed(seed, c as u64)))
        .collect();
    let points: Vec<StateVector> = chains?.into_iter().flatten().collect();
    let images: Result<Vec<StateVector>> = points.par_iter().map(|u| model.flow(u)).collect();
    let images = images?;

    let v2 = |w: &StateVector| w.norm_squared() + opts.beta * h.apply(w).norm_squared();
    let mut stream = rng::stream(seed, 0, Role::Pairs, 0);
    let m = points.len();
    let mut best = 0.0f64;
    let mut used = 0;
    for _ in 0..n_pairs {
        let i = stream.random_range(0..m);
        let mut j = stream.random_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let den = v2(&(&points[i] - &points[j]));
        if !(den > 0.0) {
            continue;
        }
        let num = h.complement(&(&images[i] - &images[j])).norm_squared();
        best = best.max(num / den);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Config(
            "all sampled pairs coincide; the squeezing ratio is undefined".into(),
        ));
    }
    Ok(AlphaEstimate {
        alpha_hat: best,
        pairs_used: used,
    })
}
