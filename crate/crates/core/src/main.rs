use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use apcsim::cli::{self, exit, FitArgs, GenerateArgs, GridArgs, PlotSource};
use apcsim::datagen::{DEFAULT_NONLINEAR, DEFAULT_SLOPE};
use apcsim::inference::{FitConfig, Method};
use apcsim::models::{ModelKind, DEFAULT_SIGMA_FLOOR};
use apcsim::ApcError;

#[derive(Parser)]
#[command(name = "apcsim", version, about = "Age-period-cohort simulation study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the artificial dataset of one case.
    Generate {
        #[arg(long = "case")]
        case_id: usize,
        #[arg(long = "I", default_value_t = 10)]
        ages: usize,
        #[arg(long = "J", default_value_t = 10)]
        periods: usize,
        #[arg(long = "T", default_value_t = 10)]
        replicates: usize,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = DEFAULT_SLOPE)]
        slope: f64,
        #[arg(long, default_value_t = DEFAULT_NONLINEAR)]
        nl: f64,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model to a dataset CSV.
    Fit {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        fit: FitFlags,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit every case with every model and grade the bias.
    Grid {
        /// Comma-separated model list.
        #[arg(long, value_delimiter = ',', default_value = "re,rr,rw")]
        models: Vec<ModelKind>,
        #[command(flatten)]
        fit: FitFlags,
        /// JSON report path; the CSV table is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Index-weight sums and the weight gap for an I x J table.
    Theory {
        #[arg(long = "I", default_value_t = 10)]
        ages: usize,
        #[arg(long = "J", default_value_t = 10)]
        periods: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export long-format plot data for a case or a fit report.
    Plotdata {
        #[arg(long = "case", conflicts_with = "fit", required_unless_present = "fit")]
        case_id: Option<usize>,
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long = "I", default_value_t = 10)]
        ages: usize,
        #[arg(long = "J", default_value_t = 10)]
        periods: usize,
        #[arg(long, default_value_t = DEFAULT_SLOPE)]
        slope: f64,
        #[arg(long, default_value_t = DEFAULT_NONLINEAR)]
        nl: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FitFlags {
    #[arg(long, default_value = "mcmc")]
    method: Method,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long = "iter", default_value_t = 6000)]
    iterations: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    thin: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    /// MAP multistart count.
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA_FLOOR)]
    sigma_floor: f64,
}

impl FitFlags {
    fn config(&self) -> FitConfig {
        FitConfig {
            method: self.method,
            chains: self.chains,
            iterations: self.iterations,
            warmup: self.warmup,
            thin: self.thin,
            seed: self.seed,
            restarts: self.restarts,
            sigma_floor: self.sigma_floor,
            ..Default::default()
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), ApcError> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"));
    Ok(())
}

fn run(cmd: Command) -> Result<(), ApcError> {
    match cmd {
        Command::Generate {
            case_id,
            ages,
            periods,
            replicates,
            gamma,
            slope,
            nl,
            seed,
            out,
        } => {
            let args = GenerateArgs {
                case_id,
                ages,
                periods,
                replicates,
                gamma,
                slope,
                nl,
                seed,
                out,
            };
            let truth = cli::cmd_generate(&args)?;
            eprintln!(
                "wrote {} rows to {} (truth in {})",
                truth.grid.n_obs(),
                args.out.display(),
                cli::truth_path(&args.out).display()
            );
        }
        Command::Fit { model, data, fit, out } => {
            let args = FitArgs {
                model,
                data,
                config: fit.config(),
                out,
            };
            let report = cli::cmd_fit(&args)?;
            if args.out.is_none() {
                print_json(&report)?;
            }
            if !report.fit.converged {
                eprintln!("warning: fit did not converge");
            }
        }
        Command::Grid { models, fit, out, jobs } => {
            let mut args = GridArgs::defaults(fit.config(), out);
            args.models = models;
            args.jobs = jobs;
            let report = cli::cmd_grid(&args)?;
            emit(&cli::grid_csv(&report.reports));
        }
        Command::Theory { ages, periods, out } => {
            let report = cli::cmd_theory(ages, periods)?;
            match out {
                Some(path) => cli::write_json(&path, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Plotdata {
            case_id,
            fit,
            ages,
            periods,
            slope,
            nl,
            out,
        } => {
            let source = match (case_id, fit) {
                (Some(case_id), None) => PlotSource::Case {
                    case_id,
                    ages,
                    periods,
                    slope,
                    nl,
                },
                (None, Some(path)) => PlotSource::Fit { path },
                _ => unreachable!("clap enforces exactly one source"),
            };
            let pts = cli::cmd_plotdata(&source, &out)?;
            eprintln!("wrote {} points to {}", pts.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
