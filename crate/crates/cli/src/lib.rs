//! Command-line front end: `advdenoise train|denoise|eval|report`.

pub mod config;
pub mod error;
pub mod infer;
pub mod report;
pub mod svg;
pub mod train;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{exit, CliError};
pub use train::PhaseSelection;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ADVDENOISE_THREADS";

const FOOTER: &str = "Exit codes: 0 success, 2 config error, 3 missing or incompatible checkpoint, \
4 non-finite loss, 5 i/o or input data error.\nADVDENOISE_THREADS caps worker threads.";

fn config_help() -> String {
    format!("{}\n{FOOTER}", RunConfig::help_text())
}

#[derive(Debug, Parser)]
#[command(
    name = "advdenoise",
    version,
    about = "Blind grayscale image denoiser with adversarial fine-tuning"
)]
#[command(after_help = FOOTER)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key=value config file; keys not set keep their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, found `{o}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(CliError::Config)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one phase or all three in order
    #[command(after_help = config_help())]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// 1, 2, 3 or all
        #[arg(long, default_value = "all")]
        phase: PhaseSelection,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this checkpoint instead of the previous phase's output
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.csv
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Denoise one image with a trained checkpoint
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGM or 8-bit PNG input of any size
        #[arg(long)]
        input: PathBuf,
        /// Output PGM path
        #[arg(long)]
        out: PathBuf,
        /// Clean image; when given, PSNR is printed
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Validation PSNR at sigma 10, 15, 20 and 25
    #[command(after_help = config_help())]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides the validation noise seed
        #[arg(long)]
        seed: Option<u64>,
        /// CSV output path (image_id, sigma, psnr_noisy, psnr_denoised)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render PSNR and adversarial loss charts from a metrics CSV
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Output directory for psnr.svg and adversarial_loss.svg
        #[arg(long)]
        out: PathBuf,
    },
}

/// Reads [`THREADS_ENV`] and sizes the global worker pool.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, found `{raw}`")))?;
    // A pool built earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(command: Command) -> Result<(), CliError> {
    configure_threads()?;
    match command {
        Command::Train {
            config,
            phase,
            seed,
            resume,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            eprintln!("config hash {}", config.hash());
            train::train(&train::TrainArgs {
                config,
                phase,
                resume,
                out,
            })
        }
        Command::Denoise {
            checkpoint,
            input,
            out,
            reference,
        } => {
            let s = infer::denoise(&checkpoint, &input, &out, reference.as_deref())?;
            println!("denoised {}x{} -> {}", s.width, s.height, out.display());
            if let (Some(a), Some(b)) = (s.psnr_input, s.psnr_output) {
                println!("psnr_input={a:.4}");
                println!("psnr_output={b:.4}");
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            seed,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(seed) = seed {
                config.validation_seed = seed;
            }
            let report = infer::eval(&checkpoint, &config, out.as_deref())?;
            println!("sigma,psnr_noisy,psnr_denoised");
            for s in &report.per_sigma {
                println!("{},{:.4},{:.4}", s.sigma, s.mean_psnr_noisy, s.mean_psnr_denoised);
            }
            Ok(())
        }
        Command::Report { metrics, out } => {
            for path in report::report(&metrics, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
