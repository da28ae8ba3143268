use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use enkf_core::error::{Error, Result};
use enkf_core::experiments::{
    emit_training_data, estimate_alpha_with, run_experiment, run_trial, surrogate_errors, write_series_csv,
    write_states_csv, AlphaOptions, ExperimentConfig, Scenario,
};
use enkf_core::observe::write_observations_csv;

#[derive(Parser)]
#[command(name = "enkf", version, about = "Ensemble Kalman filter twin experiments on Lorenz systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: noise_scaling, surrogates or mean_field.
    #[arg(short, long)]
    preset: Option<String>,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::from_path(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(Error::Config("pass --config or --preset".into())),
        };
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a truth trajectory and its observations.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Noise level; defaults to the first configured one.
        #[arg(long)]
        eps: Option<f64>,
        /// Output directory for truth.csv and observations.csv.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run one filter trial and write its error series.
    Filter {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        eps: Option<f64>,
        /// Output CSV (stdout when omitted).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the configured experiment (single, noise_scaling, surrogate or mean_field).
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides `experiment.trials`.
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides `experiment.output_dir`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Estimate (κ̂, δ̂) for each configured surrogate.
    EstimateDelta {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Summary CSV (stdout when omitted).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Estimate the squeezing constant α̂ from attractor pairs.
    EstimateAlpha {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
    },
    /// Emit (u, Ψ(u)) training pairs as CSV.
    TrainData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pairs: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print a built-in configuration as TOML.
    ShowPreset { name: String },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn scenario(cfg: &ExperimentConfig, eps: Option<f64>) -> Result<Scenario> {
    Scenario::new(cfg, eps.unwrap_or(cfg.observation.eps.values()[0]))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg, trial, eps, out } => {
            let cfg = cfg.load()?;
            let sc = scenario(&cfg, eps)?;
            let (truth, obs) = sc.generate_truth(trial, sc.steps)?;
            fs::create_dir_all(&out)?;
            write_states_csv(create(&out.join("truth.csv"))?, &truth, sc.model.dt_obs)?;
            write_observations_csv(create(&out.join("observations.csv"))?, &obs)?;
            log::info!("wrote {} steps to {}", truth.len(), out.display());
        }
        Command::Filter { cfg, trial, eps, out } => {
            let cfg = cfg.load()?;
            let sc = scenario(&cfg, eps)?;
            let series = run_trial(&sc, &sc.model, trial)?;
            write_series_csv(output(out.as_deref())?, &series)?;
        }
        Command::Experiment { cfg, trials, output } => {
            let mut cfg = cfg.load()?;
            if let Some(t) = trials {
                cfg.experiment.trials = t;
            }
            if let Some(dir) = output {
                cfg.experiment.output_dir = dir;
            }
            let result = run_experiment(&cfg)?;
            for line in &result.summary {
                println!("{line}");
            }
            log::info!(
                "wrote {} files under {}",
                result.files.len(),
                cfg.experiment.output_dir.display()
            );
        }
        Command::EstimateDelta { cfg, out } => {
            let cfg = cfg.load()?;
            let mut w = csv::Writer::from_writer(output(out.as_deref())?);
            w.write_record(["surrogate", "kappa_hat", "delta_hat", "samples"])?;
            for (label, est) in surrogate_errors(&cfg)? {
                w.write_record([
                    label,
                    format!("{:e}", est.kappa_hat),
                    format!("{:e}", est.delta_hat),
                    est.samples.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::EstimateAlpha { cfg, pairs } => {
            let cfg = cfg.load()?;
            let sc = scenario(&cfg, None)?;
            let opts = AlphaOptions {
                beta: cfg.filter.beta,
                ..AlphaOptions::default()
            };
            let est = estimate_alpha_with(&sc.model, &sc.setup.h, pairs, cfg.experiment.seed, opts)?;
            println!("alpha_hat {:.6}", est.alpha_hat);
            println!("pairs {}", est.pairs_used);
            if !est.is_contractive() {
                println!("note: alpha_hat >= 1, no squeezing detected");
            }
        }
        Command::TrainData { cfg, pairs, out } => {
            let cfg = cfg.load()?;
            let model = cfg.model.build()?;
            let n = emit_training_data(&model, pairs, cfg.experiment.seed, create(&out)?)?;
            log::info!("wrote {n} pairs to {}", out.display());
        }
        Command::ShowPreset { name } => {
            print!("{}", ExperimentConfig::preset(&name)?.to_toml_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_blow_up() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
