//! Polynomial ridge-regression surrogate with weights shared across
//! coordinates.
//!
//! Coordinate `i` of the prediction is `b + wᵀφ(u, i)` where `φ` collects the
//! monomials of degree 1..=`degree` in the window `u_{i-w} .. u_{i+w}`
//! (indices cyclic). Sharing `w` across `i` makes the surrogate commute with
//! cyclic shifts, as Lorenz-96 does. The intercept is not penalized, so a
//! huge `λ` drives the prediction to the mean target.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{sym_eig, StateVector, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RidgeFeatures {
    /// Half-width `w` of the stencil.
    pub window: usize,
    /// Highest monomial degree, 1..=3.
    pub degree: usize,
}

impl Default for RidgeFeatures {
    fn default() -> Self {
        Self { window: 2, degree: 2 }
    }
}

impl RidgeFeatures {
    fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.degree) {
            return Err(Error::Config(format!("ridge degree must be 1..=3, got {}", self.degree)));
        }
        Ok(())
    }

    /// Monomials as lists of stencil offsets (indices into `0..2w+1`).
    fn monomials(&self) -> Vec<Vec<usize>> {
        let width = 2 * self.window + 1;
        let mut out = Vec::new();
        fn rec(start: usize, width: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if left == 0 {
                out.push(cur.clone());
                return;
            }
            for j in start..width {
                cur.push(j);
                rec(j, width, left - 1, cur, out);
                cur.pop();
            }
        }
        for deg in 1..=self.degree {
            rec(0, width, deg, &mut Vec::new(), &mut out);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.monomials().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub features: RidgeFeatures,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

struct FeatureMap {
    window: usize,
    monomials: Vec<Vec<usize>>,
}

impl FeatureMap {
    fn new(features: RidgeFeatures) -> Self {
        Self {
            window: features.window,
            monomials: features.monomials(),
        }
    }

    fn fill(&self, u: &[f64], i: usize, stencil: &mut [f64], out: &mut [f64]) {
        let d = u.len();
        for (j, s) in stencil.iter_mut().enumerate() {
            *s = u[(i + d * (self.window + 1) + j - self.window) % d];
        }
        for (o, mono) in out.iter_mut().zip(&self.monomials) {
            *o = mono.iter().map(|&j| stencil[j]).product();
        }
    }
}

impl RidgeModel {
    pub fn predict(&self, u: &StateVector) -> Result<StateVector> {
        check_dim("RidgeModel::predict", self.dim, u.len())?;
        let map = FeatureMap::new(self.features);
        let mut stencil = vec![0.0; 2 * self.features.window + 1];
        let mut phi = vec![0.0; self.weights.len()];
        Ok(DVector::from_fn(self.dim, |i, _| {
            map.fill(u.as_slice(), i, &mut stencil, &mut phi);
            self.intercept + phi.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
        }))
    }
}

/// Fits a [`RidgeModel`] to `(u, Ψ(u))` pairs by solving the regularized
/// normal equations `(XcᵀXc + λI) w = Xcᵀyc` on centered features.
pub fn train_ridge_quadratic(
    pairs: &[(StateVector, StateVector)],
    lambda: f64,
    features: RidgeFeatures,
) -> Result<RidgeModel> {
    features.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge λ must be finite and >= 0, got {lambda}")));
    }
    let p = features.count();
    if pairs.len() < 10 * p {
        return Err(Error::Config(format!(
            "ridge regression with {p} features needs >= {} pairs, got {}",
            10 * p,
            pairs.len()
        )));
    }
    let d = pairs[0].0.len();
    for (u, v) in pairs {
        check_dim("train_ridge_quadratic (input)", d, u.len())?;
        check_dim("train_ridge_quadratic (output)", d, v.len())?;
    }
    let map = FeatureMap::new(features);
    let mut stencil = vec![0.0; 2 * features.window + 1];
    let mut phi = vec![0.0; p];
    let rows = (pairs.len() * d) as f64;

    // pass 1: means
    let mut phi_mean = DVector::zeros(p);
    let mut y_mean = 0.0;
    for (u, v) in pairs {
        for i in 0..d {
            map.fill(u.as_slice(), i, &mut stencil, &mut phi);
            for (m, f) in phi_mean.iter_mut().zip(&phi) {
                *m += f;
            }
            y_mean += v[i];
        }
    }
    phi_mean /= rows;
    y_mean /= rows;

    // pass 2: centered Gram matrix (upper triangle) and right-hand side
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut centered = vec![0.0; p];
    for (u, v) in pairs {
        for i in 0..d {
            map.fill(u.as_slice(), i, &mut stencil, &mut phi);
            for ((c, f), m) in centered.iter_mut().zip(&phi).zip(phi_mean.iter()) {
                *c = f - m;
            }
            let yc = v[i] - y_mean;
            for a in 0..p {
                let ca = centered[a];
                rhs[a] += ca * yc;
                for b in a..p {
                    gram[(a, b)] += ca * centered[b];
                }
            }
        }
    }
    gram.fill_lower_triangle_with_upper_triangle();
    for a in 0..p {
        gram[(a, a)] += lambda;
    }
    let gram = SymMatrix::symmetrize(&gram);
    let eig = sym_eig(&gram)?;
    let (lo, hi) = (eig.values[0], eig.values[p - 1]);
    if !(lo > 1e-13 * hi) {
        return Err(Error::Singular(format!(
            "ridge normal equations are singular (eigenvalues {lo:.3e} .. {hi:.3e}, λ = {lambda})"
        )));
    }
    let weights = eig.vectors.transpose() * rhs;
    let weights = &eig.vectors * weights.component_div(&eig.values);
    let intercept = y_mean - weights.dot(&phi_mean);
    Ok(RidgeModel {
        features,
        dim: d,
        weights: weights.as_slice().to_vec(),
        intercept,
    })
}
