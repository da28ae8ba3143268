//! Surrogate flow maps `Ψ^s`, attractor sampling and empirical model-error
//! estimates `(κ̂, δ̂)`.

use rayon::prelude::*;

use crate::dynamics::{with_step, DynamicsModel, FlowMap, SystemKind};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{ObservationMatrix, StateVector};
use crate::nn::{nn_forward, NetworkWeights};
use crate::ridge::RidgeModel;
use crate::rng::{self, Role};

#[derive(Debug, Clone, PartialEq)]
pub enum SurrogateKind {
    /// The true vector field with fewer RK4 substeps.
    CoarseStep { substeps: usize },
    /// Lorenz-96 with forcing `F + ΔF`.
    PerturbedForcing { delta_forcing: f64 },
    RidgeQuadratic(RidgeModel),
    /// With `residual`, the network predicts `Ψ(u) - u`.
    NeuralNet { weights: NetworkWeights, residual: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub kind: SurrogateKind,
    /// The truth model the surrogate stands in for.
    pub base: DynamicsModel,
    /// Integrated model for the ODE-based kinds.
    ode: Option<DynamicsModel>,
}

impl SurrogateModel {
    pub fn new(kind: SurrogateKind, base: DynamicsModel) -> Result<Self> {
        let d = base.system.dim();
        let ode = match &kind {
            SurrogateKind::CoarseStep { substeps } => Some(base.with_substeps(*substeps)?),
            SurrogateKind::PerturbedForcing { delta_forcing } => match base.system {
                SystemKind::Lorenz96 { dim, forcing } => Some(base.with_system(SystemKind::Lorenz96 {
                    dim,
                    forcing: forcing + delta_forcing,
                })?),
                _ => {
                    return Err(Error::Config(
                        "perturbed_forcing surrogate needs a Lorenz-96 base model".into(),
                    ))
                }
            },
            SurrogateKind::RidgeQuadratic(model) => {
                check_dim("ridge surrogate", d, model.dim)?;
                None
            }
            SurrogateKind::NeuralNet { weights, .. } => {
                weights.validate()?;
                check_dim("neural surrogate", d, weights.spatial_dim)?;
                None
            }
        };
        Ok(Self { kind, base, ode })
    }

    pub fn coarse_step(base: &DynamicsModel, substeps: usize) -> Result<Self> {
        Self::new(SurrogateKind::CoarseStep { substeps }, base.clone())
    }

    pub fn perturbed_forcing(base: &DynamicsModel, delta_forcing: f64) -> Result<Self> {
        Self::new(SurrogateKind::PerturbedForcing { delta_forcing }, base.clone())
    }

    /// Short label used in tables, e.g. `coarse_step(10)`.
    pub fn label(&self) -> String {
        match &self.kind {
            SurrogateKind::CoarseStep { substeps } => format!("coarse_step({substeps})"),
            SurrogateKind::PerturbedForcing { delta_forcing } => format!("perturbed_forcing({delta_forcing})"),
            SurrogateKind::RidgeQuadratic(m) => {
                format!("ridge_quadratic(w={},deg={})", m.features.window, m.features.degree)
            }
            SurrogateKind::NeuralNet { .. } => "neural_net".to_string(),
        }
    }
}

/// One `Δt` step under the surrogate.
pub fn surrogate_flow(s: &SurrogateModel, u: &StateVector) -> Result<StateVector> {
    check_dim("surrogate_flow", s.base.system.dim(), u.len())?;
    if !u.iter().all(|v| v.is_finite()) {
        return Err(Error::BlowUp {
            step: 0,
            context: "surrogate input is not finite".into(),
        });
    }
    let out = match (&s.kind, &s.ode) {
        (_, Some(model)) => return model.flow(u),
        (SurrogateKind::RidgeQuadratic(model), _) => model.predict(u)?,
        (SurrogateKind::NeuralNet { weights, residual }, _) => {
            let out = nn_forward(weights, u)?;
            if *residual {
                out + u
            } else {
                out
            }
        }
        _ => unreachable!("ODE surrogates carry an integrated model"),
    };
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::BlowUp {
            step: 0,
            context: format!("{} produced a non-finite state", s.label()),
        });
    }
    Ok(out)
}

impl FlowMap for SurrogateModel {
    fn dim(&self) -> usize {
        self.base.system.dim()
    }

    fn flow(&self, u: &StateVector) -> Result<StateVector> {
        surrogate_flow(self, u)
    }
}

/// `n` states from one long trajectory: start at a seeded `N(0, I)` draw,
/// discard `burn_in` steps, then keep every `stride`-th state.
pub fn sample_attractor(
    model: &dyn FlowMap,
    n: usize,
    burn_in: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<StateVector>> {
    if n == 0 {
        return Err(Error::Config("attractor sample count must be >= 1".into()));
    }
    if stride == 0 {
        return Err(Error::Config("attractor sampling stride must be >= 1".into()));
    }
    let mut u = rng::standard_normal(&mut rng::stream(seed, 0, Role::Attractor, 0), model.dim());
    for step in 0..burn_in {
        u = model.flow(&u).map_err(|e| with_step(e, step))?;
    }
    let mut out = Vec::with_capacity(n);
    let mut step = burn_in;
    while out.len() < n {
        for _ in 0..stride {
            u = model.flow(&u).map_err(|e| with_step(e, step))?;
            step += 1;
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// `(u, Ψ(u))` pairs along `n_traj` trajectories of `steps` steps each,
/// started from seeded `N(0, I)` draws after `burn_in` discarded steps.
pub fn trajectory_pairs(
    model: &dyn FlowMap,
    n_traj: usize,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<(StateVector, StateVector)>> {
    let chunks: Result<Vec<Vec<_>>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut stream = rng::stream(seed, traj as u64, Role::TrainingData, 0);
            let mut u = rng::standard_normal(&mut stream, model.dim());
            for step in 0..burn_in {
                u = model.flow(&u).map_err(|e| with_step(e, step))?;
            }
            let mut pairs = Vec::with_capacity(steps);
            for step in 0..steps {
                let next = model.flow(&u).map_err(|e| with_step(e, burn_in + step))?;
                pairs.push((u, next.clone()));
                u = next;
            }
            Ok(pairs)
        })
        .collect();
    Ok(chunks?.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelErrorEstimate {
    /// `max ‖Ψ^s(u) − Ψ(u)‖`
    pub kappa_hat: f64,
    /// `max ‖(I − P)(Ψ^s(u) − Ψ(u))‖`
    pub delta_hat: f64,
    pub samples: usize,
}

/// Maximum one-step surrogate error over `samples`, in full and on the
/// unobserved complement of `h`.
pub fn estimate_model_error(
    truth: &dyn FlowMap,
    surrogate: &dyn FlowMap,
    samples: &[StateVector],
    h: &ObservationMatrix,
) -> Result<ModelErrorEstimate> {
    if samples.is_empty() {
        return Err(Error::Config("model error needs at least one sample".into()));
    }
    check_dim("estimate_model_error", truth.dim(), surrogate.dim())?;
    check_dim("estimate_model_error (H)", truth.dim(), h.state_dim())?;
    let errors: Result<Vec<(f64, f64)>> = samples
        .par_iter()
        .map(|u| {
            let diff = surrogate.flow(u)? - truth.flow(u)?;
            let full = diff.norm();
            // the complement of an orthogonal projection never lengthens a vector
            let unobserved = h.complement(&diff).norm().min(full);
            Ok((full, unobserved))
        })
        .collect();
    let (kappa_hat, delta_hat) = errors?
        .into_iter()
        .fold((0.0f64, 0.0f64), |(k, d), (ek, ed)| (k.max(ek), d.max(ed)));
    Ok(ModelErrorEstimate {
        kappa_hat,
        delta_hat,
        samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::estimate_ball_radius;
    use crate::nn::{Activation, Layer, MergeRouting};
    use crate::observe::l96_partial_h;
    use crate::ridge::{train_ridge_quadratic, RidgeFeatures};
    use nalgebra::DVector;

    fn l96() -> DynamicsModel {
        DynamicsModel::lorenz96(12).unwrap()
    }

    #[test]
    fn degenerate_surrogates_match_truth() {
        let base = l96();
        let u = DVector::from_fn(12, |i, _| (i as f64).sin() * 3.0);
        let exact = base.flow(&u).unwrap();
        assert_eq!(surrogate_flow(&SurrogateModel::coarse_step(&base, 100).unwrap(), &u).unwrap(), exact);
        assert_eq!(surrogate_flow(&SurrogateModel::perturbed_forcing(&base, 0.0).unwrap(), &u).unwrap(), exact);
    }

    #[test]
    fn perturbed_forcing_needs_lorenz96() {
        let base = DynamicsModel::lorenz63().unwrap();
        assert!(matches!(SurrogateModel::perturbed_forcing(&base, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn residual_network_with_zero_output_is_identity() {
        let base = l96();
        let layer = Layer::conv(1, 1, 5, Activation::Identity);
        let weights = NetworkWeights::new(12, vec![layer]).unwrap();
        let s = SurrogateModel::new(
            SurrogateKind::NeuralNet {
                weights: weights.clone(),
                residual: true,
            },
            base.clone(),
        )
        .unwrap();
        let u = DVector::from_fn(12, |i, _| i as f64);
        assert_eq!(surrogate_flow(&s, &u).unwrap(), u);
        let wrong = NetworkWeights::conv_surrogate(9, 2, 3, 5, MergeRouting::Diagram, 0).unwrap();
        assert!(SurrogateModel::new(
            SurrogateKind::NeuralNet {
                weights: wrong,
                residual: false
            },
            base
        )
        .is_err());
    }

    #[test]
    fn attractor_sampling() {
        let model = l96();
        let a = sample_attractor(&model, 50, 200, 5, 3).unwrap();
        let b = sample_attractor(&model, 50, 200, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        let radius = estimate_ball_radius(&model, 200.0, 1).unwrap();
        assert!(a.iter().all(|u| u.norm() <= radius));
        assert!(matches!(sample_attractor(&model, 5, 10, 0, 3), Err(Error::Config(_))));
        assert!(sample_attractor(&model, 0, 10, 1, 3).is_err());
    }

    #[test]
    fn model_error_of_exact_surrogate_is_zero() {
        let base = l96();
        let samples = sample_attractor(&base, 20, 100, 3, 1).unwrap();
        let h = l96_partial_h(12).unwrap();
        let est = estimate_model_error(&base, &base, &samples, &h).unwrap();
        assert_eq!((est.kappa_hat, est.delta_hat, est.samples), (0.0, 0.0, 20));
        assert!(estimate_model_error(&base, &base, &[], &h).is_err());
    }

    #[test]
    fn coarse_errors_decrease_with_substeps() {
        let base = l96();
        let samples = sample_attractor(&base, 40, 100, 4, 2).unwrap();
        let h = l96_partial_h(12).unwrap();
        let deltas: Vec<f64> = [1, 2, 5, 10]
            .iter()
            .map(|&s| {
                let est =
                    estimate_model_error(&base, &SurrogateModel::coarse_step(&base, s).unwrap(), &samples, &h).unwrap();
                assert!(est.delta_hat <= est.kappa_hat);
                est.delta_hat
            })
            .collect();
        assert!(deltas.windows(2).all(|w| w[1] <= w[0]), "{deltas:?}");
    }

    #[test]
    fn ridge_surrogate_runs() {
        let base = l96();
        let pairs = trajectory_pairs(&base, 4, 100, 100, 5).unwrap();
        assert_eq!(pairs.len(), 400);
        let model = train_ridge_quadratic(&pairs, 1e-6, RidgeFeatures::default()).unwrap();
        let s = SurrogateModel::new(SurrogateKind::RidgeQuadratic(model), base.clone()).unwrap();
        let (u, v) = &pairs[17];
        let err = (surrogate_flow(&s, u).unwrap() - v).norm();
        assert!(err < 0.2 * v.norm(), "{err}");
    }
}
