use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gluon::harness::{self, ExperimentConfig, HarnessError};
use gluon::optimizer::Preset;
use gluon::smoothness::{suggest_stepsize, SmoothnessFit};
use gluon::theory::RateInputs;

#[derive(Parser)]
#[command(
    name = "gluon",
    version,
    about = "Layer-wise LMO optimizers, smoothness fitting and rate calculators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Also write the final parameters next to the trace.
        #[arg(long)]
        dump_params: bool,
    },
    /// Fit (L0, L1) per group from a trace and write a report.
    Estimate {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        /// Target accuracy for the iteration counts in the report.
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Report path; defaults to `<trace>.report.toml`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the closed-form iteration counts and bounds.
    Rates {
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        delta0: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        l0: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        l1: Vec<f64>,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long)]
        zeta: Option<f64>,
        #[arg(long)]
        mu: Option<f64>,
        /// Iteration count for the stochastic bound.
        #[arg(long)]
        k: Option<u64>,
        /// Base radii for the L1 = 0 branch of the stochastic bound.
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<f64>>,
    },
    /// Stepsize g / (L0 + L1 g) from fitted constants.
    Suggest {
        #[arg(long)]
        l0: f64,
        #[arg(long)]
        l1: f64,
        #[arg(long)]
        g: f64,
    },
    /// Built-in norm presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run { config, dump_params } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.dump_params |= dump_params;
            let outcome = harness::run(&cfg)?;
            let last_f = outcome.trace.records.last().map_or(f64::NAN, |r| r.f_value);
            println!("trace = {:?}", cfg.trace_path.display().to_string());
            println!("rows = {}", outcome.trace.records.len());
            println!("last_f_value = {last_f:e}");
            Ok(())
        }
        Command::Estimate {
            trace,
            lambda,
            eps,
            out,
        } => {
            let report = harness::estimate_file(&trace, lambda, eps, out.as_deref());
            match report {
                Ok(r) => {
                    print!("{}", r.to_toml());
                    Ok(())
                }
                Err(e) => Err(e),
            }
        }
        Command::Rates {
            p,
            delta0,
            l0,
            l1,
            eps,
            sigma,
            zeta,
            mu,
            k,
            t,
        } => {
            if let Some(p) = p {
                if l0.len() != p || l1.len() != p || t.as_ref().is_some_and(|t| t.len() != p) {
                    return Err(HarnessError::Input(format!(
                        "--p {p} does not match the lengths of --l0 ({}), --l1 ({}) or --t",
                        l0.len(),
                        l1.len()
                    )));
                }
            }
            let mut inp = RateInputs::new(delta0, l0, l1, eps);
            inp.sigma = sigma;
            inp.zeta = zeta;
            inp.mu = mu;
            inp.radii = t;
            let table = harness::rates_table(&inp, k)?;
            print!("{}", toml::to_string(&table).expect("table is valid toml"));
            Ok(())
        }
        Command::Suggest { l0, l1, g } => {
            if !(l0 >= 0.0 && l1 >= 0.0) {
                return Err(HarnessError::Input("L0 and L1 must be nonnegative".into()));
            }
            let fit = SmoothnessFit {
                l0,
                l1,
                lambda: 0.0,
                mse_rel: None,
                n_points: 0,
                tie_broken: false,
            };
            let step = suggest_stepsize(&fit, g).map_err(|e| HarnessError::Input(e.to_string()))?;
            println!("{}", format_sig3(step));
            Ok(())
        }
        Command::Presets {
            action: PresetAction::List,
        } => {
            for p in Preset::ALL {
                println!("{:<14} {}", p.name(), p.description());
            }
            Ok(())
        }
    }
}

/// Three significant digits, fixed notation for moderate magnitudes.
fn format_sig3(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return v.to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{:.*}", (2 - mag).max(0) as usize, v)
    } else {
        format!("{v:.2e}")
    }
}
