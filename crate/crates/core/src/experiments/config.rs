//! Declarative experiment configuration (TOML).
//!
//! ```toml
//! [model]
//! system = "lorenz96"     # lorenz63 | lorenz96 | linear_decay
//! dim = 60
//! forcing = 8.0
//! dt_obs = 0.1
//! substeps = 100
//!
//! [observation]
//! operator = "drop_every_third"   # identity | drop_every_third | first_coordinate | { rows = [..] }
//! eps = [1.0, 0.1, 0.01, 0.001]   # or a single number
//! noise_var = 1.0                 # R = noise_var * I
//!
//! [filter]
//! method = "enkf"                 # enkf | mean_field
//! n_members = 50
//! inflation = 1.0
//! mode = "stochastic"             # stochastic | deterministic
//! beta = 1.0
//! project = true                  # ball_radius omitted => estimated from a long run
//! init_var = 1.0
//! n_mc = 10000
//!
//! [[surrogate.models]]
//! kind = "perturbed_forcing"      # coarse_step | perturbed_forcing | ridge_quadratic | neural_net
//! delta_forcing = 1.0
//!
//! [experiment]
//! kind = "noise_scaling"          # single | noise_scaling | surrogate | mean_field
//! trials = 50
//! horizon = 25.0
//! burn_in = 10.0
//! truth_init_var = 10.0
//! seed = 2024
//! output_dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsModel, SystemKind};
use crate::enkf::InflationMode;
use crate::error::{Error, Result};
use crate::linalg::ObservationMatrix;
use crate::nn::load_weights;
use crate::observe::{l63_partial_h, l96_partial_h};
use crate::ridge::{train_ridge_quadratic, RidgeFeatures};
use crate::rng;
use crate::surrogate::{trajectory_pairs, SurrogateKind, SurrogateModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub system: SystemKind,
    #[serde(default = "default_dt")]
    pub dt_obs: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_dt() -> f64 {
    0.1
}
fn default_substeps() -> usize {
    100
}

impl ModelSpec {
    pub fn build(&self) -> Result<DynamicsModel> {
        DynamicsModel::new(self.system.clone(), self.dt_obs, self.substeps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorSpec {
    Identity,
    /// Identity with rows 2, 5, 8, ... removed.
    DropEveryThird,
    FirstCoordinate,
    Rows(Vec<usize>),
}

impl OperatorSpec {
    pub fn build(&self, state_dim: usize) -> Result<ObservationMatrix> {
        match self {
            OperatorSpec::Identity => Ok(ObservationMatrix::identity(state_dim)),
            OperatorSpec::DropEveryThird => l96_partial_h(state_dim),
            OperatorSpec::FirstCoordinate if state_dim == 3 => Ok(l63_partial_h()),
            OperatorSpec::FirstCoordinate => ObservationMatrix::selection(state_dim, &[0]),
            OperatorSpec::Rows(rows) => ObservationMatrix::selection(state_dim, rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsSpec {
    One(f64),
    Many(Vec<f64>),
}

impl EpsSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            EpsSpec::One(e) => vec![*e],
            EpsSpec::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    pub operator: OperatorSpec,
    pub eps: EpsSpec,
    #[serde(default = "one")]
    pub noise_var: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    #[default]
    Enkf,
    MeanField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default)]
    pub method: FilterMethod,
    #[serde(default = "default_members")]
    pub n_members: usize,
    #[serde(default = "one")]
    pub inflation: f64,
    #[serde(default)]
    pub mode: InflationMode,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "yes")]
    pub project: bool,
    /// Estimated from a long truth run when omitted.
    #[serde(default)]
    pub ball_radius: Option<f64>,
    #[serde(default = "one")]
    pub init_var: f64,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
}

fn default_members() -> usize {
    50
}
fn yes() -> bool {
    true
}
fn default_n_mc() -> usize {
    10_000
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            method: FilterMethod::Enkf,
            n_members: default_members(),
            inflation: 1.0,
            mode: InflationMode::Stochastic,
            beta: 1.0,
            project: true,
            ball_radius: None,
            init_var: 1.0,
            n_mc: default_n_mc(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurrogateSpec {
    CoarseStep {
        substeps: usize,
    },
    PerturbedForcing {
        delta_forcing: f64,
    },
    RidgeQuadratic {
        #[serde(default = "default_ridge_traj")]
        trajectories: usize,
        #[serde(default = "default_ridge_steps")]
        steps: usize,
        #[serde(default = "default_ridge_lambda")]
        lambda: f64,
        #[serde(default)]
        features: RidgeFeatures,
    },
    NeuralNet {
        path: PathBuf,
        #[serde(default = "yes")]
        residual: bool,
    },
}

fn default_ridge_traj() -> usize {
    100
}
fn default_ridge_steps() -> usize {
    1000
}
fn default_ridge_lambda() -> f64 {
    1e-6
}

impl SurrogateSpec {
    /// Builds the surrogate; ridge models are trained here on truth pairs
    /// collected after a 500-step burn-in.
    pub fn build(&self, base: &DynamicsModel, seed: u64) -> Result<SurrogateModel> {
        let kind = match self {
            SurrogateSpec::CoarseStep { substeps } => SurrogateKind::CoarseStep { substeps: *substeps },
            SurrogateSpec::PerturbedForcing { delta_forcing } => SurrogateKind::PerturbedForcing {
                delta_forcing: *delta_forcing,
            },
            SurrogateSpec::RidgeQuadratic {
                trajectories,
                steps,
                lambda,
                features,
            } => {
                let pairs = trajectory_pairs(base, *trajectories, *steps, 500, rng::derive_seed(seed, 0x7269_6467))?;
                SurrogateKind::RidgeQuadratic(train_ridge_quadratic(&pairs, *lambda, *features)?)
            }
            SurrogateSpec::NeuralNet { path, residual } => SurrogateKind::NeuralNet {
                weights: load_weights(path)?,
                residual: *residual,
            },
        };
        SurrogateModel::new(kind, base.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    pub models: Vec<SurrogateSpec>,
    /// Attractor points for the `(κ̂, δ̂)` estimate.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_sample_burn_in")]
    pub sample_burn_in: usize,
    #[serde(default = "default_sample_stride")]
    pub sample_stride: usize,
    #[serde(default = "default_open_loop")]
    pub open_loop_horizon: f64,
}

fn default_samples() -> usize {
    1000
}
fn default_sample_burn_in() -> usize {
    1000
}
fn default_sample_stride() -> usize {
    10
}
fn default_open_loop() -> f64 {
    4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Single,
    NoiseScaling,
    Surrogate,
    MeanField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default)]
    pub kind: ExperimentKind,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "default_truth_var")]
    pub truth_init_var: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_trials() -> usize {
    50
}
fn default_horizon() -> f64 {
    25.0
}
fn default_burn_in() -> f64 {
    10.0
}
fn default_truth_var() -> f64 {
    10.0
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub observation: ObservationSpec,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub surrogate: Option<SurrogateSection>,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative weight paths are taken relative to the config file
        if let (Some(dir), Some(section)) = (path.parent(), cfg.surrogate.as_mut()) {
            for spec in &mut section.models {
                if let SurrogateSpec::NeuralNet { path: p, .. } = spec {
                    if p.is_relative() {
                        *p = dir.join(&*p);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Named presets: `noise_scaling` (Lorenz-96 at four noise levels, a = 1),
    /// `surrogates` (four surrogate forecasts, a = 10, ε = 0.1) and
    /// `mean_field` (Lorenz-63 Gaussian projected filter).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            model: ModelSpec {
                system: SystemKind::lorenz96(60),
                dt_obs: 0.1,
                substeps: 100,
            },
            observation: ObservationSpec {
                operator: OperatorSpec::DropEveryThird,
                eps: EpsSpec::Many(vec![1.0, 1e-1, 1e-2, 1e-3]),
                noise_var: 1.0,
            },
            filter: FilterSpec::default(),
            surrogate: None,
            experiment: ExperimentSection {
                kind: ExperimentKind::NoiseScaling,
                trials: 50,
                horizon: 25.0,
                burn_in: 10.0,
                truth_init_var: 10.0,
                seed: 2024,
                output_dir: PathBuf::from("out").join(name),
            },
        };
        let cfg = match name {
            "noise_scaling" => base,
            "surrogates" => Self {
                observation: ObservationSpec {
                    eps: EpsSpec::One(0.1),
                    ..base.observation
                },
                filter: FilterSpec {
                    inflation: 10.0,
                    ..base.filter
                },
                surrogate: Some(SurrogateSection {
                    models: vec![
                        SurrogateSpec::PerturbedForcing { delta_forcing: 2.0 },
                        SurrogateSpec::PerturbedForcing { delta_forcing: 1.0 },
                        SurrogateSpec::CoarseStep { substeps: 1 },
                        SurrogateSpec::CoarseStep { substeps: 10 },
                    ],
                    samples: default_samples(),
                    sample_burn_in: default_sample_burn_in(),
                    sample_stride: default_sample_stride(),
                    open_loop_horizon: default_open_loop(),
                }),
                experiment: ExperimentSection {
                    kind: ExperimentKind::Surrogate,
                    ..base.experiment
                },
                ..base
            },
            "mean_field" => Self {
                model: ModelSpec {
                    system: SystemKind::lorenz63(),
                    dt_obs: 0.1,
                    substeps: 100,
                },
                observation: ObservationSpec {
                    operator: OperatorSpec::FirstCoordinate,
                    eps: EpsSpec::One(0.1),
                    noise_var: 1.0,
                },
                filter: FilterSpec {
                    method: FilterMethod::MeanField,
                    n_mc: 10_000,
                    ..base.filter
                },
                experiment: ExperimentSection {
                    kind: ExperimentKind::MeanField,
                    trials: 10,
                    ..base.experiment
                },
                ..base
            },
            other => return Err(Error::Config(format!("unknown preset {other:?} (noise_scaling, surrogates, mean_field)"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        let h = self.observation.operator.build(model.system.dim())?;
        let eps = self.observation.eps.values();
        if eps.is_empty() || eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("noise levels must be finite and >= 0, got {eps:?}")));
        }
        if !(self.observation.noise_var > 0.0 && self.observation.noise_var.is_finite()) {
            return Err(Error::Config("noise_var must be positive".into()));
        }
        let f = &self.filter;
        if f.n_members < 2 {
            return Err(Error::Config("n_members must be >= 2".into()));
        }
        if !(f.inflation >= 0.0 && f.inflation.is_finite()) {
            return Err(Error::Config("inflation must be finite and >= 0".into()));
        }
        if !(f.beta >= 0.0 && f.beta.is_finite()) {
            return Err(Error::Config("beta must be finite and >= 0".into()));
        }
        if !(f.init_var > 0.0 && f.init_var.is_finite()) {
            return Err(Error::Config("init_var must be positive".into()));
        }
        if matches!(f.ball_radius, Some(r) if !(r > 0.0)) {
            return Err(Error::Config("ball_radius must be positive".into()));
        }
        if f.method == FilterMethod::MeanField && f.n_mc < 2 {
            return Err(Error::Config("n_mc must be >= 2".into()));
        }
        let e = &self.experiment;
        if e.trials == 0 {
            return Err(Error::Config("trial count must be >= 1".into()));
        }
        if !(e.burn_in >= 0.0 && e.horizon > e.burn_in && e.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "need horizon > burn_in >= 0, got horizon {} and burn_in {}",
                e.horizon, e.burn_in
            )));
        }
        steps_for(e.horizon, model.dt_obs)?;
        if !(e.truth_init_var > 0.0) {
            return Err(Error::Config("truth_init_var must be positive".into()));
        }
        if e.kind == ExperimentKind::NoiseScaling && eps.len() < 2 {
            return Err(Error::Config("noise scaling needs at least two noise levels".into()));
        }
        if e.kind == ExperimentKind::Surrogate {
            match &self.surrogate {
                Some(s) if !s.models.is_empty() => {
                    if s.samples == 0 || s.sample_stride == 0 {
                        return Err(Error::Config("surrogate samples and sample_stride must be >= 1".into()));
                    }
                    if !(s.open_loop_horizon > 0.0) {
                        return Err(Error::Config("open_loop_horizon must be positive".into()));
                    }
                }
                _ => return Err(Error::Config("surrogate experiment needs [[surrogate.models]]".into())),
            }
        }
        if e.kind == ExperimentKind::MeanField && f.method != FilterMethod::MeanField {
            return Err(Error::Config("mean_field experiment needs filter.method = \"mean_field\"".into()));
        }
        log::debug!("config ok: d = {}, k = {}", model.system.dim(), h.obs_dim());
        Ok(())
    }
}

/// Number of `dt` steps in `time`, which must be a whole multiple.
pub fn steps_for(time: f64, dt: f64) -> Result<usize> {
    let steps = (time / dt).round();
    if (steps * dt - time).abs() > 1e-9 * time.max(1.0) {
        return Err(Error::Config(format!("time {time} is not a multiple of dt_obs = {dt}")));
    }
    Ok(steps as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[model]
system = "lorenz96"
dim = 12

[observation]
operator = "drop_every_third"
eps = 0.1

[filter]
n_members = 20
inflation = 10.0

[[surrogate.models]]
kind = "coarse_step"
substeps = 5

[[surrogate.models]]
kind = "ridge_quadratic"
features = { window = 1, degree = 2 }

[experiment]
kind = "surrogate"
trials = 3
horizon = 2.0
burn_in = 1.0
"#;

    #[test]
    fn parses_documented_schema() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.model.system, SystemKind::lorenz96(12));
        assert_eq!(cfg.model.substeps, 100);
        assert_eq!(cfg.observation.eps.values(), vec![0.1]);
        assert_eq!(cfg.filter.n_members, 20);
        assert_eq!(cfg.filter.beta, 1.0);
        let s = cfg.surrogate.as_ref().unwrap();
        assert_eq!(s.models.len(), 2);
        assert_eq!(s.samples, 1000);
        assert_eq!(cfg.experiment.truth_init_var, 10.0);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = SAMPLE.replace("burn_in = 1.0", "burn_in = 3.0");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = SAMPLE.replace("trials = 3", "trials = 0");
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().is_config());
        let bad = SAMPLE.replace("kind = \"surrogate\"", "kind = \"noise_scaling\"");
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().is_config());
        let bad = SAMPLE.replace("dim = 12", "dim = 10");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = SAMPLE.replace("n_members = 20", "n_member = 20");
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().is_config());
        let bad = SAMPLE.replace("horizon = 2.0", "horizon = 2.05");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn presets() {
        let noise = ExperimentConfig::preset("noise_scaling").unwrap();
        assert_eq!(noise.filter.inflation, 1.0);
        assert_eq!(noise.observation.eps.values(), vec![1.0, 1e-1, 1e-2, 1e-3]);
        let surr = ExperimentConfig::preset("surrogates").unwrap();
        assert_eq!(surr.filter.inflation, 10.0);
        assert_eq!(surr.experiment.kind, ExperimentKind::Surrogate);
        assert_eq!(ExperimentConfig::preset("mean_field").unwrap().filter.method, FilterMethod::MeanField);
        assert!(ExperimentConfig::preset("no_such_preset").unwrap_err().is_config());
    }

    #[test]
    fn step_counts() {
        assert_eq!(steps_for(25.0, 0.1).unwrap(), 250);
        assert_eq!(steps_for(0.3, 0.1).unwrap(), 3);
        assert!(steps_for(0.25, 0.1).is_err());
    }
}
