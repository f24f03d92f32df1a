//! `voxsr`: simulate training pairs, train, super-resolve and evaluate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, I/O or
//! numerical error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use voxsr::simulate::PatchSpec;
use voxsr::SrRequest;

use crate::config::{EvalRunConfig, SimulateConfig, SrRunConfig};
use crate::error::{CliError, CliResult, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "voxsr", version, about = "Arbitrary-scale super-resolution for 3D volumes")]
struct Cli {
    /// Worker threads (defaults to the number of available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract LR/HR training patch pairs from HR volumes.
    Simulate {
        /// HR volume (.nii file or .vvol directory) or a directory of them; repeatable.
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory (vvol pairs plus index.json).
        #[arg(long)]
        out: PathBuf,
        /// Patch pairs per source volume.
        #[arg(long, default_value_t = 6)]
        patches: usize,
        /// LR patch side.
        #[arg(long, default_value_t = 10)]
        lr_size: usize,
        /// Random crop side before the HR center crop.
        #[arg(long, default_value_t = 40)]
        crop_size: usize,
        #[arg(long, default_value_t = 2.0)]
        kmin: f64,
        #[arg(long, default_value_t = 4.0)]
        kmax: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep raw intensities instead of rescaling each volume to [0, 1].
        #[arg(long)]
        no_normalize: bool,
    },
    /// Train a model from a JSON run configuration (see docs/config.md).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Initial learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Patch pairs per optimizer step.
        #[arg(long)]
        pairs_per_step: Option<usize>,
        /// Coordinates sampled per HR patch per step.
        #[arg(long)]
        coords: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        train_index: Option<PathBuf>,
        #[arg(long)]
        val_index: Option<PathBuf>,
    },
    /// Super-resolve one volume with a trained checkpoint.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output path; `.nii` writes NIfTI-1, anything else a vvol directory.
        #[arg(long)]
        output: PathBuf,
        /// Isotropic up-sampling factor (>= 1, need not be an integer).
        #[arg(long)]
        scale: f64,
        /// Coordinates decoded per batch.
        #[arg(long, default_value_t = 65_536)]
        chunk_size: usize,
        /// Clamp output intensities to [0, 1].
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        clamp: Switch,
        /// Largest LR region (voxels) encoded in one pass.
        #[arg(long, default_value_t = voxsr::infer::DEFAULT_ENCODE_BUDGET)]
        encode_budget: usize,
    },
    /// Score a reconstruction against its reference.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        report: PathBuf,
        /// Up-sampling factor, recorded in the report.
        #[arg(long)]
        scale: Option<f64>,
        /// Skip the windowed 3D SSIM.
        #[arg(long)]
        no_windowed: bool,
        /// Skip slice-wise SSIM.
        #[arg(long)]
        no_slicewise: bool,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            inputs,
            out,
            patches,
            lr_size,
            crop_size,
            kmin,
            kmax,
            seed,
            no_normalize,
        } => commands::simulate(&SimulateConfig {
            inputs,
            out_dir: out,
            patches: PatchSpec {
                n_patches: patches,
                lr_size,
                crop_size,
            },
            k_min: kmin,
            k_max: kmax,
            seed,
            normalize: !no_normalize,
        }),
        Command::Train {
            config,
            epochs,
            lr,
            seed,
            pairs_per_step,
            coords,
            out,
            train_index,
            val_index,
        } => {
            let mut cfg = config::load_train_config(&config)?;
            if let Some(v) = epochs {
                cfg.train.total_epochs = v;
            }
            if let Some(v) = lr {
                cfg.train.lr_init = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(v) = pairs_per_step {
                cfg.train.n_pairs_per_step = v;
            }
            if let Some(v) = coords {
                cfg.train.k_coords = v;
            }
            if let Some(v) = out {
                cfg.out_dir = v;
            }
            if let Some(v) = train_index {
                cfg.data.train_index = v;
            }
            if let Some(v) = val_index {
                cfg.data.val_index = Some(v);
            }
            commands::train_run(&cfg)
        }
        Command::Sr {
            checkpoint,
            input,
            output,
            scale,
            chunk_size,
            clamp,
            encode_budget,
        } => commands::sr(&SrRunConfig {
            checkpoint,
            input,
            output,
            request: SrRequest {
                scale,
                chunk_size,
                clamp_output: clamp == Switch::On,
                encode_budget,
            },
        }),
        Command::Eval {
            sr,
            gt,
            report,
            scale,
            no_windowed,
            no_slicewise,
        } => commands::eval(&EvalRunConfig {
            sr,
            gt,
            report,
            scale,
            windowed: !no_windowed,
            slicewise: !no_slicewise,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
