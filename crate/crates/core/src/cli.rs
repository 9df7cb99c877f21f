//! Command-line front end. `run` is what the binary calls; it is public so the
//! whole flow can be driven in-process from tests.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::metrics::evaluate_dir;
use crate::pipeline::{self, TrainConfig};
use crate::plot;
use crate::preprocess::{build_training_set, save_triples};

/// Overrides the default output location of every subcommand.
pub const ENV_OUT_DIR: &str = "UWBRIGHT_OUT_DIR";
/// Device selection; only `cpu` is supported.
pub const ENV_DEVICE: &str = "UWBRIGHT_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "uwbright", version, about = "Diffusion-based brightness enhancement for underwater images")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file merged over the built-in defaults
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Base random seed (overrides the config file)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build training triples (low, high, fusion map) from a directory of images
    Preprocess {
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train the denoiser; writes per-epoch checkpoints and train_log.jsonl
    Train {
        /// Raw images or a preprocessed directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the newest checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Enhance an image or every image in a directory
    Enhance {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Target brightness in [0, 1]; defaults to the config value
        #[arg(long)]
        lambda: Option<f64>,
        /// DDIM steps; defaults to the config value
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory; defaults to next to each input
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compute PSNR/SSIM (with references) and UIQM/UISM for a directory
    Evaluate {
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "DIR")]
        reference: Option<PathBuf>,
        /// Report path; both .json and .csv are written
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Render loss-curve and metric-bar PNGs
    Plot {
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn device() -> Result<Device> {
    match std::env::var(ENV_DEVICE) {
        Err(_) => Ok(Device::Cpu),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok(Device::Cpu),
        Ok(v) => Err(Error::Config(format!("{ENV_DEVICE}={v} is not supported; use cpu"))),
    }
}

fn out_dir(explicit: Option<PathBuf>, fallback: &str) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(ENV_OUT_DIR).map(|d| PathBuf::from(d).join(fallback)))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Preprocess { input, out } => {
            require_dir(&input)?;
            let out = out_dir(out, "preprocessed");
            let triples = build_training_set(&input, cfg.seed, cfg.image_size, &cfg.snr)?;
            let entries = save_triples(&triples, &out)?;
            println!("wrote {} triples to {}", entries.len(), out.display());
        }
        Command::Train {
            data,
            out,
            epochs,
            resume,
        } => {
            require_dir(&data)?;
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let out = out_dir(out, "run");
            let outcome = pipeline::train(&cfg, &data, &out, resume, &device()?)?;
            println!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Enhance {
            checkpoint,
            input,
            lambda,
            steps,
            out,
        } => {
            let lambda = lambda.unwrap_or(cfg.default_lambda);
            let steps = steps.unwrap_or(cfg.ddim_steps);
            let out = out.or_else(|| std::env::var_os(ENV_OUT_DIR).map(|d| PathBuf::from(d).join("enhanced")));
            let written = pipeline::enhance(&checkpoint, &input, lambda, steps, cfg.seed, out.as_deref(), &device()?)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { pred, reference, out } => {
            require_dir(&pred)?;
            if let Some(r) = &reference {
                require_dir(r)?;
            }
            let out = out_dir(out, "report.json");
            let report = evaluate_dir(&pred, reference.as_deref())?;
            let (json, csv) = report.write(&out)?;
            println!("wrote {} and {}", json.display(), csv.display());
        }
        Command::Plot { log, report, out } => {
            if log.is_none() && report.is_none() {
                return Err(Error::InvalidArgument("plot needs --log and/or --report".into()));
            }
            let out = out_dir(out, "plots");
            if let Some(log) = log {
                let target = out.join("loss_curve.png");
                plot::loss_curve(&plot::read_log(&log)?, &target)?;
                println!("{}", target.display());
            }
            if let Some(report) = report {
                let target = out.join("metrics.png");
                plot::metric_bars(&plot::read_report(&report)?, &target)?;
                println!("{}", target.display());
            }
        }
    }
    Ok(())
}

/// Parses `argv` and runs it, returning the process exit code: 0 on success,
/// 2 for usage errors, 1 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
