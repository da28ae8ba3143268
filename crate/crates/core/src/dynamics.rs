//! Truth dynamics: Δt-flow maps of Lorenz-63 and Lorenz-96 integrated with
//! classical RK4, and the V-norm projection onto the absorbing ball.
//!
//! Both Lorenz systems have the dissipative form `du/dt + Au + B(u,u) = F`
//! with an energy-conserving bilinear term, `<B(u,u), u> = 0`. Lorenz-63 is
//! written in the shifted coordinates `z -> z - (ρ + σ)`, which is what makes
//! `B` energy-conserving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{ObservationMatrix, StateVector};
use crate::rng::{self, Role};

/// A map advancing a state by one observation interval.
pub trait FlowMap: Sync {
    fn dim(&self) -> usize;
    fn flow(&self, u: &StateVector) -> Result<StateVector>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemKind {
    Lorenz63 {
        #[serde(default = "default_l63_sigma")]
        sigma: f64,
        #[serde(default = "default_l63_rho")]
        rho: f64,
        #[serde(default = "default_l63_b")]
        b: f64,
    },
    Lorenz96 {
        dim: usize,
        #[serde(default = "default_l96_forcing")]
        forcing: f64,
    },
    /// `du/dt = -rate u`; used to check the integrator against `e^{-rate t}`.
    LinearDecay { dim: usize, rate: f64 },
}

fn default_l63_sigma() -> f64 {
    10.0
}
fn default_l63_rho() -> f64 {
    28.0
}
fn default_l63_b() -> f64 {
    8.0 / 3.0
}
fn default_l96_forcing() -> f64 {
    8.0
}

impl SystemKind {
    pub fn lorenz63() -> Self {
        SystemKind::Lorenz63 {
            sigma: default_l63_sigma(),
            rho: default_l63_rho(),
            b: default_l63_b(),
        }
    }

    pub fn lorenz96(dim: usize) -> Self {
        SystemKind::Lorenz96 {
            dim,
            forcing: default_l96_forcing(),
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            SystemKind::Lorenz63 { .. } => 3,
            SystemKind::Lorenz96 { dim, .. } => dim,
            SystemKind::LinearDecay { dim, .. } => dim,
        }
    }

    /// Writes the vector field at `u` into `out`.
    pub fn rhs_into(&self, u: &[f64], out: &mut [f64]) {
        match *self {
            SystemKind::Lorenz63 { sigma, rho, b } => {
                out[0] = -sigma * u[0] + sigma * u[1];
                out[1] = -sigma * u[0] - u[1] - u[0] * u[2];
                out[2] = -b * u[2] + u[0] * u[1] - b * (rho + sigma);
            }
            SystemKind::Lorenz96 { dim, forcing } => {
                let at = |i: usize| u[i % dim];
                // wrap-around terms first, then the interior without modulo
                for i in [0, 1, dim - 1] {
                    out[i] = (at(i + 1) - at(i + dim - 2)) * at(i + dim - 1) - u[i] + forcing;
                }
                for i in 2..dim - 1 {
                    out[i] = (u[i + 1] - u[i - 2]) * u[i - 1] - u[i] + forcing;
                }
            }
            SystemKind::LinearDecay { rate, .. } => {
                for (o, &x) in out.iter_mut().zip(u) {
                    *o = -rate * x;
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SystemKind::Lorenz63 { sigma, rho, b } => {
                if ![sigma, rho, b].iter().all(|v| v.is_finite()) {
                    return Err(Error::Config("Lorenz-63 parameters must be finite".into()));
                }
            }
            SystemKind::Lorenz96 { dim, forcing } => {
                if dim < 4 {
                    return Err(Error::Config(format!("Lorenz-96 needs dim >= 4, got {dim}")));
                }
                if !forcing.is_finite() {
                    return Err(Error::Config("Lorenz-96 forcing must be finite".into()));
                }
            }
            SystemKind::LinearDecay { dim, rate } => {
                if dim == 0 || !rate.is_finite() {
                    return Err(Error::Config("linear decay needs dim >= 1, finite rate".into()));
                }
            }
        }
        Ok(())
    }
}

/// Lorenz-63 vector field `F - Au - B(u,u)` with (σ, b, ρ) = (10, 8/3, 28).
pub fn lorenz63_rhs(u: &StateVector) -> Result<StateVector> {
    check_dim("lorenz63_rhs", 3, u.len())?;
    let mut out = DVector::zeros(3);
    SystemKind::lorenz63().rhs_into(u.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Lorenz-96 vector field with forcing 8, cyclic indexing.
pub fn lorenz96_rhs(u: &StateVector) -> Result<StateVector> {
    if u.len() < 4 {
        return Err(Error::Config(format!("Lorenz-96 needs dim >= 4, got {}", u.len())));
    }
    let mut out = DVector::zeros(u.len());
    SystemKind::lorenz96(u.len()).rhs_into(u.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Symmetric bilinear term of Lorenz-63 in shifted coordinates.
pub fn lorenz63_bilinear(u: &StateVector, v: &StateVector) -> StateVector {
    DVector::from_vec(vec![
        0.0,
        (u[0] * v[2] + u[2] * v[0]) / 2.0,
        -(u[0] * v[1] + u[1] * v[0]) / 2.0,
    ])
}

/// Linear part `A` of Lorenz-63 in shifted coordinates.
pub fn lorenz63_linear() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[10.0, -10.0, 0.0, 10.0, 1.0, 0.0, 0.0, 0.0, 8.0 / 3.0])
}

/// Symmetric bilinear term of Lorenz-96, written out row by row.
pub fn lorenz96_bilinear(u: &StateVector, v: &StateVector) -> StateVector {
    let d = u.len();
    let at = |x: &StateVector, i: isize| x[i.rem_euclid(d as isize) as usize];
    DVector::from_fn(d, |i, _| {
        let i = i as isize;
        -0.5 * (at(v, i - 1) * at(u, i + 1) + at(u, i - 1) * at(v, i + 1)
            - at(v, i - 2) * at(u, i - 1)
            - at(u, i - 2) * at(v, i - 1))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub system: SystemKind,
    /// Time between observations, Δt.
    pub dt_obs: f64,
    /// RK4 steps per observation interval.
    pub substeps: usize,
}

impl DynamicsModel {
    pub fn new(system: SystemKind, dt_obs: f64, substeps: usize) -> Result<Self> {
        system.validate()?;
        if !(dt_obs > 0.0 && dt_obs.is_finite()) {
            return Err(Error::Config(format!("dt_obs must be positive, got {dt_obs}")));
        }
        if substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        Ok(Self {
            system,
            dt_obs,
            substeps,
        })
    }

    /// Lorenz-96 with forcing 8, Δt = 0.1 and 100 RK4 substeps.
    pub fn lorenz96(dim: usize) -> Result<Self> {
        Self::new(SystemKind::lorenz96(dim), 0.1, 100)
    }

    pub fn lorenz63() -> Result<Self> {
        Self::new(SystemKind::lorenz63(), 0.1, 100)
    }

    pub fn step_size(&self) -> f64 {
        self.dt_obs / self.substeps as f64
    }

    pub fn with_substeps(&self, substeps: usize) -> Result<Self> {
        Self::new(self.system.clone(), self.dt_obs, substeps)
    }

    pub fn with_system(&self, system: SystemKind) -> Result<Self> {
        Self::new(system, self.dt_obs, self.substeps)
    }
}

/// Classical RK4 with `substeps` equal steps over `dt`.
pub fn integrate_rk4(system: &SystemKind, u: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>> {
    let n = u.len();
    let h = dt / substeps as f64;
    let mut x = u.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for step in 0..substeps {
        system.rhs_into(&x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        system.rhs_into(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        system.rhs_into(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        system.rhs_into(&tmp, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp {
                step,
                context: format!("RK4 substep {step} of {substeps}"),
            });
        }
    }
    Ok(x)
}

impl FlowMap for DynamicsModel {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn flow(&self, u: &StateVector) -> Result<StateVector> {
        check_dim("flow", self.dim(), u.len())?;
        let out = integrate_rk4(&self.system, u.as_slice(), self.dt_obs, self.substeps)?;
        Ok(DVector::from_vec(out))
    }
}

/// Affine map `u -> Au + c`; the linear-Gaussian reference case.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl LinearMap {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        check_dim("LinearMap (square)", matrix.nrows(), matrix.ncols())?;
        check_dim("LinearMap (offset)", matrix.nrows(), offset.len())?;
        Ok(Self { matrix, offset })
    }

    pub fn scaled_identity(dim: usize, factor: f64) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim) * factor,
            offset: DVector::zeros(dim),
        }
    }
}

impl FlowMap for LinearMap {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn flow(&self, u: &StateVector) -> Result<StateVector> {
        check_dim("LinearMap::flow", self.dim(), u.len())?;
        Ok(&self.matrix * u + &self.offset)
    }
}

/// Ball `{|u| <= r}` together with the V-norm `(|u|² + β|Pu|²)^{1/2}` used to
/// project onto it.
#[derive(Debug, Clone, PartialEq)]
pub struct BallSpec {
    pub radius: f64,
    pub beta: f64,
    pub h: ObservationMatrix,
}

impl BallSpec {
    pub fn new(radius: f64, beta: f64, h: ObservationMatrix) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::Config(format!("ball radius must be >= 0, got {radius}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("V-norm weight must be >= 0, got {beta}")));
        }
        Ok(Self { radius, beta, h })
    }

    /// A ball that never binds.
    pub fn unbounded(beta: f64, h: ObservationMatrix) -> Self {
        Self {
            radius: f64::INFINITY,
            beta,
            h,
        }
    }
}

const PROJECTION_TOL: f64 = 1e-12;
const PROJECTION_MAX_ITER: usize = 200;

/// Orthogonal projection of `u` onto the ball in the V-norm.
///
/// Outside the ball the minimizer of `V(u - v)` over `|v| <= r` is
/// `v(λ) = (1+β)/(1+β+λ) Pu + 1/(1+λ) (I-P)u` with the multiplier `λ > 0`
/// fixed by `|v(λ)| = r`. The norm is strictly decreasing in `λ`, so the root
/// is bracketed and found by Newton steps with bisection fallback.
pub fn project_ball_v(u: &StateVector, ball: &BallSpec) -> Result<StateVector> {
    check_dim("project_ball_v", ball.h.state_dim(), u.len())?;
    let r = ball.radius;
    let norm = u.norm();
    if norm <= r {
        return Ok(u.clone());
    }
    if r == 0.0 {
        return Ok(DVector::zeros(u.len()));
    }
    let observed = ball.h.project(u);
    let unobserved = u - &observed;
    let a2 = observed.norm_squared();
    let b2 = unobserved.norm_squared();
    let beta = ball.beta;

    let norm_at = |lambda: f64| -> f64 {
        let p = (1.0 + beta) / (1.0 + beta + lambda);
        let q = 1.0 / (1.0 + lambda);
        (p * p * a2 + q * q * b2).sqrt()
    };
    let build = |lambda: f64| -> StateVector {
        let p = (1.0 + beta) / (1.0 + beta + lambda);
        let q = 1.0 / (1.0 + lambda);
        &observed * p + &unobserved * q
    };

    if beta == 0.0 {
        return Ok(u * (r / norm));
    }

    let mut lo = 0.0f64;
    let mut hi = ((1.0 + beta) * norm / r - 1.0).max(0.0);
    while norm_at(hi) > r {
        hi = 2.0 * hi + 1.0;
    }
    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..PROJECTION_MAX_ITER {
        let value = norm_at(lambda);
        let g = value - r;
        if g.abs() <= PROJECTION_TOL * r {
            let v = build(lambda);
            let vn = v.norm();
            // |vn - r| <= 1e-12 r here; pull the last ulps inside the ball
            return Ok(if vn <= r { v } else { v * (r / vn) });
        }
        if g > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        // d|v|/dλ = -(p² a² /(1+β+λ) + q² b²/(1+λ)) / |v|
        let p = (1.0 + beta) / (1.0 + beta + lambda);
        let q = 1.0 / (1.0 + lambda);
        let slope = -(p * p * a2 / (1.0 + beta + lambda) + q * q * b2 / (1.0 + lambda)) / value;
        let newton = lambda - g / slope;
        lambda = if newton > lo && newton < hi && slope < 0.0 {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(Error::RootFinding(format!(
        "ball projection multiplier did not converge (bracket [{lo}, {hi}])"
    )))
}

/// Empirical absorbing-ball radius: 1.1 × the largest state norm seen after
/// a 10% burn-in on a trajectory started from a seeded standard normal draw.
pub fn estimate_ball_radius(model: &DynamicsModel, horizon: f64, seed: u64) -> Result<f64> {
    if !(horizon >= 100.0 * model.dt_obs) {
        return Err(Error::Config(format!(
            "horizon {horizon} shorter than 100 observation intervals"
        )));
    }
    let steps = (horizon / model.dt_obs).round() as usize;
    let burn_in = steps / 10;
    let mut u = rng::standard_normal(&mut rng::stream(seed, 0, Role::BallRadius, 0), model.dim());
    let mut largest = 0.0f64;
    for step in 0..steps {
        u = model.flow(&u).map_err(|e| with_step(e, step))?;
        if step >= burn_in {
            largest = largest.max(u.norm());
        }
    }
    Ok(1.1 * largest)
}

pub(crate) fn with_step(err: Error, step: usize) -> Error {
    match err {
        Error::BlowUp { context, .. } => Error::BlowUp { step, context },
        other => other,
    }
}
