//! Command-line front end. Exit codes: 0 success, 1 configuration or usage
//! error, 2 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{AefError, Result};
use crate::harness::{self, Holdout};
use crate::optim::Weighting;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "aef", version, about = "Universal perturbations against surrogate image editors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides `[hp] seed`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the ensemble and optimize a perturbation.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "adaptive", value_parser = parse_weighting)]
        weighting: Weighting,
    },
    /// Evaluate a saved perturbation on every ensemble member.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        perturbation: PathBuf,
    },
    /// One train and eval per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of T, alpha, lambda, beta, T_in.
        #[arg(long, value_name = "NAME")]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_name = "CSV")]
        values: String,
        #[arg(long, default_value = "adaptive", value_parser = parse_weighting)]
        weighting: Weighting,
    },
    /// Train without one model (or on one model only) and evaluate on all.
    Holdout {
        #[command(flatten)]
        common: Common,
        /// Model left out of training; every model in turn if omitted.
        #[arg(long, value_name = "MODEL", conflicts_with = "only")]
        exclude: Option<String>,
        /// Single-source mode: train on this model alone.
        #[arg(long, value_name = "MODEL")]
        only: Option<String>,
        #[arg(long, default_value = "adaptive", value_parser = parse_weighting)]
        weighting: Weighting,
    },
    /// Paired adaptive and uniform-weight runs.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_weighting(s: &str) -> std::result::Result<Weighting, String> {
    s.parse().map_err(|e: AefError| e.to_string())
}

/// Parse a comma-separated list of numbers.
pub fn parse_values(csv: &str) -> Result<Vec<f64>> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| AefError::Config(format!("`{s}` is not a number")))
        })
        .collect()
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(dir) = &common.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.hp.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, weighting } => {
            let cfg = load(&common)?;
            let out = harness::cmd_train(&cfg, weighting)?;
            println!("wrote {}", out.perturbation_path.display());
        }
        Command::Eval { common, perturbation } => {
            let cfg = load(&common)?;
            let out = harness::cmd_eval(&cfg, &perturbation)?;
            for s in &out.summaries {
                println!("{:<28} SRmask {:>6.2}%  L2mask {:.4}", s.model, s.srmask_pct, s.l2mask);
            }
            println!(
                "imperceptibility: PSNR {:.2} dB, SSIM {:.4}",
                out.imperceptibility_psnr_db, out.imperceptibility_ssim
            );
        }
        Command::Sweep {
            common,
            param,
            values,
            weighting,
        } => {
            let cfg = load(&common)?;
            let values = parse_values(&values)?;
            for pt in harness::cmd_sweep(&cfg, &param, &values, weighting)? {
                let sr: Vec<String> = pt.eval.summaries.iter().map(|s| format!("{:.2}", s.srmask_pct)).collect();
                println!("{param}={}: SRmask [{}], std {:.2}", pt.value, sr.join(", "), pt.eval.srmask_std);
            }
        }
        Command::Holdout {
            common,
            exclude,
            only,
            weighting,
        } => {
            let cfg = load(&common)?;
            let mode = exclude.map(Holdout::Exclude).or(only.map(Holdout::SingleSource));
            for out in harness::cmd_holdout(&cfg, mode, weighting)? {
                let (white, black) = out.srmask_by_role();
                println!("white-box SRmask {white:.2}%, black-box SRmask {black:.2}%");
            }
        }
        Command::Ablate { common } => {
            let cfg = load(&common)?;
            let out = harness::cmd_ablate(&cfg)?;
            println!(
                "adaptive: min SRmask {:.2}%, std {:.2}; static: min SRmask {:.2}%, std {:.2}",
                harness::AblationOutcome::min_srmask(&out.adaptive),
                out.adaptive.srmask_std,
                harness::AblationOutcome::min_srmask(&out.uniform),
                out.uniform.srmask_std
            );
        }
    }
    Ok(())
}

pub fn exit_code(err: &AefError) -> u8 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

/// Parse `args`, run, and return the exit code.
pub fn run_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run_args(std::env::args_os()))
}
