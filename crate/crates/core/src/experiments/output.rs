//! CSV emission and the config-driven experiment runner.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind};
use super::{
    mean_field_experiment, noise_scaling_experiment, run_monte_carlo, surrogate_experiment, AggregateStats,
    ErrorSeries, MonteCarlo, Scenario,
};
use crate::dynamics::{with_step, FlowMap};
use crate::error::{Error, Result};
use crate::linalg::StateVector;
use crate::rng::{self, Role};

fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_series_csv<W: Write>(out: W, series: &ErrorSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "time", "error", "cov_trace", "observed_error"])?;
    for r in &series.records {
        w.write_record([
            r.step.to_string(),
            num(r.time),
            num(r.error),
            num(r.cov_trace),
            num(r.observed_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(out: W, stats: &AggregateStats) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "time", "mean_error", "stderr", "band_lo", "band_hi"])?;
    for r in &stats.rows {
        w.write_record([
            r.step.to_string(),
            num(r.time),
            num(r.mean_error),
            num(r.stderr),
            num(r.band_lo),
            num(r.band_hi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes states `u_1..u_n` as CSV with columns `step, time, u_1 .. u_d`.
pub fn write_states_csv<W: Write>(out: W, states: &[StateVector], dt: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = states.first().map_or(0, |u| u.len());
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((1..=d).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    for (i, u) in states.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string(), num((i + 1) as f64 * dt)];
        rec.extend(u.iter().map(|v| format!("{v:.17e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Files written by [`run_experiment`] and a human-readable summary.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

impl ExperimentOutput {
    fn create(&mut self, path: PathBuf) -> Result<BufWriter<File>> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = File::create(&path)?;
        self.files.push(path);
        Ok(BufWriter::new(file))
    }

    fn monte_carlo(&mut self, dir: &Path, prefix: &str, mc: &MonteCarlo) -> Result<()> {
        write_aggregate_csv(self.create(dir.join(format!("{prefix}aggregate.csv")))?, &mc.stats)?;
        for s in &mc.series {
            let path = dir.join("trials").join(format!("{prefix}trial_{:03}.csv", s.trial));
            write_series_csv(self.create(path)?, s)?;
        }
        Ok(())
    }
}

/// Runs the experiment described by `cfg` and writes its CSVs under
/// `cfg.experiment.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dir = cfg.experiment.output_dir.clone();
    let mut out = ExperimentOutput::default();
    match cfg.experiment.kind {
        ExperimentKind::Single => {
            let scenario = Scenario::new(cfg, cfg.observation.eps.values()[0])?;
            let mc = run_monte_carlo(&scenario, &scenario.model, cfg.experiment.trials)?;
            out.monte_carlo(&dir, "", &mc)?;
            out.summary
                .push(format!("steady-state error {:.6e}", mc.stats.steady_state_mean));
        }
        ExperimentKind::MeanField => {
            let mc = mean_field_experiment(cfg)?;
            out.monte_carlo(&dir, "", &mc)?;
            out.summary
                .push(format!("steady-state error {:.6e}", mc.stats.steady_state_mean));
        }
        ExperimentKind::NoiseScaling => {
            let result = noise_scaling_experiment(cfg)?;
            let mut w = csv::Writer::from_writer(out.create(dir.join("summary.csv"))?);
            w.write_record(["eps", "steady_state_error", "stderr"])?;
            for (i, level) in result.levels.iter().enumerate() {
                let stats = &level.result.stats;
                w.write_record([num(level.eps), num(stats.steady_state_mean), num(stats.steady_state_stderr)])?;
                out.summary.push(format!(
                    "eps {:e}: steady-state error {:.6e} ± {:.2e}",
                    level.eps, stats.steady_state_mean, stats.steady_state_stderr
                ));
                out.monte_carlo(&dir, &format!("eps{i}_"), &level.result)?;
            }
            w.flush()?;
            drop(w);
            let mut w = csv::Writer::from_writer(out.create(dir.join("fit.csv"))?);
            w.write_record(["loglog_slope"])?;
            w.write_record([num(result.slope)])?;
            w.flush()?;
            out.summary.push(format!("log-log slope {:.4}", result.slope));
        }
        ExperimentKind::Surrogate => {
            let study = surrogate_experiment(cfg)?;
            out.monte_carlo(&dir, "reference_", &study.reference)?;
            let mut w = csv::Writer::from_writer(out.create(dir.join("surrogate_summary.csv"))?);
            w.write_record([
                "surrogate",
                "kappa_hat",
                "delta_hat",
                "steady_state_error",
                "stderr",
                "divergence_time",
            ])?;
            w.write_record([
                "truth".to_string(),
                num(0.0),
                num(0.0),
                num(study.reference.stats.steady_state_mean),
                num(study.reference.stats.steady_state_stderr),
                String::new(),
            ])?;
            for (i, row) in study.rows.iter().enumerate() {
                let s = &row.result.stats;
                w.write_record([
                    row.label.clone(),
                    num(row.estimate.kappa_hat),
                    num(row.estimate.delta_hat),
                    num(s.steady_state_mean),
                    num(s.steady_state_stderr),
                    row.divergence_time.map(num).unwrap_or_default(),
                ])?;
                out.summary.push(format!(
                    "{}: delta_hat {:.3e}, steady-state error {:.4e}",
                    row.label, row.estimate.delta_hat, s.steady_state_mean
                ));
                out.monte_carlo(&dir, &format!("surrogate{i}_"), &row.result)?;
            }
            w.flush()?;
            drop(w);
            let mut w = csv::Writer::from_writer(out.create(dir.join("open_loop.csv"))?);
            let mut header = vec!["step".to_string(), "time".to_string()];
            header.extend(study.rows.iter().map(|r| r.label.clone()));
            w.write_record(&header)?;
            let dt = cfg.model.dt_obs;
            let steps = study.rows.first().map_or(0, |r| r.open_loop.len());
            for j in 0..steps {
                let mut rec = vec![(j + 1).to_string(), num((j + 1) as f64 * dt)];
                rec.extend(study.rows.iter().map(|r| num(r.open_loop[j])));
                w.write_record(&rec)?;
            }
            w.flush()?;
            out.summary.push(format!("attractor RMS {:.4}", study.attractor_rms));
        }
    }
    Ok(out)
}

/// Writes `n_pairs` rows `(u, Ψ(u))` collected along `⌈√n⌉` trajectories
/// started from standard normal draws, with columns `u_1..u_d, psi_1..psi_d`.
pub fn emit_training_data<W: Write>(model: &dyn FlowMap, n_pairs: usize, seed: u64, out: W) -> Result<usize> {
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be >= 1".into()));
    }
    let d = model.dim();
    let n_traj = (n_pairs as f64).sqrt().ceil() as usize;
    let steps = n_pairs.div_ceil(n_traj);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=d).map(|i| format!("u_{i}")).collect();
    header.extend((1..=d).map(|i| format!("psi_{i}")));
    w.write_record(&header)?;
    let mut written = 0;
    let batch = 32;
    for start in (0..n_traj).step_by(batch) {
        let chunk: Result<Vec<Vec<(StateVector, StateVector)>>> = (start..(start + batch).min(n_traj))
            .into_par_iter()
            .map(|traj| {
                let mut stream = rng::stream(seed, traj as u64, Role::TrainingData, 0);
                let mut u = rng::standard_normal(&mut stream, d);
                let mut pairs = Vec::with_capacity(steps);
                for step in 0..steps {
                    let next = model.flow(&u).map_err(|e| with_step(e, step))?;
                    pairs.push((u, next.clone()));
                    u = next;
                }
                Ok(pairs)
            })
            .collect();
        for (u, psi) in chunk?.into_iter().flatten() {
            if written == n_pairs {
                break;
            }
            let rec: Vec<String> = u.iter().chain(psi.iter()).map(|v| format!("{v:.17e}")).collect();
            w.write_record(&rec)?;
            written += 1;
        }
    }
    w.flush()?;
    Ok(written)
}

/// Reads a file written by [`emit_training_data`].
pub fn read_training_data<R: Read>(input: R) -> Result<Vec<(StateVector, StateVector)>> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers()?.len();
    if width == 0 || width % 2 != 0 {
        return Err(Error::Schema(format!("training data needs 2d columns, found {width}")));
    }
    let d = width / 2;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Schema(format!("bad number {f:?}: {e}"))))
            .collect::<Result<_>>()?;
        out.push((DVector::from_column_slice(&vals[..d]), DVector::from_column_slice(&vals[d..])));
    }
    Ok(out)
}
