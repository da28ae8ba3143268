//! Linear observation operators and synthetic observations
//! `y_j = H u_j + ε η_j`, `η_j ~ N(0, R)`.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{psd_sqrt, ObservationMatrix, StateVector, SymMatrix};
use crate::rng::{self, Role};

/// Identity with every third row removed (0-based rows 2, 5, 8, ...).
pub fn l96_partial_h(d: usize) -> Result<ObservationMatrix> {
    if d == 0 || d % 3 != 0 {
        return Err(Error::InvalidObservation(format!(
            "state dimension {d} is not a positive multiple of 3"
        )));
    }
    let rows: Vec<usize> = (0..d).filter(|i| i % 3 != 2).collect();
    ObservationMatrix::selection(d, &rows)
}

/// Observes the first Lorenz-63 coordinate.
pub fn l63_partial_h() -> ObservationMatrix {
    ObservationMatrix::selection(3, &[0]).expect("valid selection")
}

#[derive(Debug, Clone)]
pub struct ObservationSetup {
    pub h: ObservationMatrix,
    pub r: SymMatrix,
    pub eps: f64,
    pub rng_seed: u64,
    r_sqrt: SymMatrix,
}

impl ObservationSetup {
    pub fn new(h: ObservationMatrix, r: SymMatrix, eps: f64, rng_seed: u64) -> Result<Self> {
        check_dim("ObservationSetup (R)", h.obs_dim(), r.dim())?;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("noise scale must be finite and >= 0, got {eps}")));
        }
        let eig = crate::linalg::sym_eig(&r)?;
        if r.dim() > 0 && !(eig.values[0] > 0.0) {
            return Err(Error::Config("observation covariance R must be positive definite".into()));
        }
        let r_sqrt = psd_sqrt(&r)?;
        Ok(Self {
            h,
            r,
            eps,
            rng_seed,
            r_sqrt,
        })
    }

    /// `R = I_k`.
    pub fn with_identity_noise(h: ObservationMatrix, eps: f64, rng_seed: u64) -> Result<Self> {
        let k = h.obs_dim();
        Self::new(h, SymMatrix::identity(k), eps, rng_seed)
    }

    pub fn obs_dim(&self) -> usize {
        self.h.obs_dim()
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.h.clone(), self.r.clone(), eps, self.rng_seed)
    }
}

/// Noisy observation of `u` at assimilation step `step`.
///
/// The noise is a pure function of `(rng_seed, step)`.
pub fn gen_observation(setup: &ObservationSetup, u: &StateVector, step: usize) -> Result<DVector<f64>> {
    check_dim("gen_observation", setup.h.state_dim(), u.len())?;
    let clean = setup.h.apply(u);
    if setup.eps == 0.0 {
        return Ok(clean);
    }
    let mut stream = rng::stream(setup.rng_seed, 0, Role::ObservationNoise, step as u64);
    let z = rng::standard_normal(&mut stream, setup.obs_dim());
    Ok(clean + setup.r_sqrt.as_matrix() * z * setup.eps)
}

/// Writes observations as CSV with columns `step, y_1 .. y_k`.
///
/// `observations[i]` is taken to be the observation at step `i + 1`.
pub fn write_observations_csv<W: Write>(out: W, observations: &[DVector<f64>]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let k = observations.first().map_or(0, |y| y.len());
    let mut header = vec!["step".to_string()];
    header.extend((1..=k).map(|i| format!("y_{i}")));
    writer.write_record(&header)?;
    for (i, y) in observations.iter().enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(y.iter().map(|v| format!("{v:.17e}")));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn l96_operator_shapes() {
        let h = l96_partial_h(3).unwrap();
        assert_eq!(h.selected_rows().unwrap(), &[0, 1]);
        let h = l96_partial_h(60).unwrap();
        assert_eq!(h.obs_dim(), 40);
        assert!(h.selected_rows().unwrap().iter().all(|i| i % 3 != 2));
        let hh = h.matrix() * h.matrix().transpose();
        assert_eq!(hh, DMatrix::identity(40, 40));
        let p = h.projector();
        assert_eq!(&p * &p, p);
        assert!(l96_partial_h(10).is_err());
    }

    #[test]
    fn l63_operator() {
        let h = l63_partial_h();
        let u = DVector::from_vec(vec![1.5, -2.0, 7.0]);
        assert_eq!(h.apply(&u)[0], 1.5);
        assert_eq!((h.matrix() * h.matrix().transpose())[(0, 0)], 1.0);
        let pu = h.project(&u);
        assert_eq!(pu, DVector::from_vec(vec![1.5, 0.0, 0.0]));
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let setup = ObservationSetup::with_identity_noise(l96_partial_h(6).unwrap(), 0.0, 1).unwrap();
        let u = DVector::from_fn(6, |i, _| i as f64);
        assert_eq!(gen_observation(&setup, &u, 3).unwrap(), setup.h.apply(&u));
    }

    #[test]
    fn observation_noise_is_keyed_by_step() {
        let setup = ObservationSetup::with_identity_noise(l96_partial_h(6).unwrap(), 0.5, 9).unwrap();
        let u = DVector::from_element(6, 1.0);
        let a = gen_observation(&setup, &u, 4).unwrap();
        assert_eq!(a, gen_observation(&setup, &u, 4).unwrap());
        assert_ne!(a, gen_observation(&setup, &u, 5).unwrap());
        assert_ne!(a, gen_observation(&setup.with_seed(10), &u, 4).unwrap());
    }

    #[test]
    fn observation_noise_covariance() {
        let h = l96_partial_h(6).unwrap();
        let eps = 0.3;
        let setup = ObservationSetup::with_identity_noise(h, eps, 21).unwrap();
        let u = DVector::from_element(6, 2.0);
        let hu = setup.h.apply(&u);
        let n = 100_000;
        let mut cov = DMatrix::zeros(4, 4);
        let mut mean = DVector::zeros(4);
        for step in 0..n {
            let z = (gen_observation(&setup, &u, step).unwrap() - &hu) / eps;
            cov += &z * z.transpose();
            mean += z;
        }
        mean /= n as f64;
        let cov = cov / n as f64 - &mean * mean.transpose();
        let rel = (cov - DMatrix::identity(4, 4)).norm() / 2.0;
        assert!(rel < 0.02, "rel {rel}");
        assert!(mean.amax() < 0.02);
    }

    #[test]
    fn csv_layout() {
        let obs = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])];
        let mut buf = Vec::new();
        write_observations_csv(&mut buf, &obs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,y_1,y_2");
        assert!(lines.next().unwrap().starts_with("1,"));
        assert_eq!(text.lines().count(), 3);
    }
}
