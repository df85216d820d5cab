//! `voxdiff`: phantom generation, diffusion training and sampling,
//! evaluation and segmentation experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use voxdiff_cli::{exit, exit_code, resolve_config};
use voxdiff_core::config::Preset;

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "VOXDIFF_THREADS";

#[derive(Parser)]
#[command(name = "voxdiff", version, about = "Mask-conditioned 3D diffusion synthesis")]
struct Cli {
    /// TOML run configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base settings: `desk` (16^3) or `paper` (128^3).
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural phantom dataset.
    GenPhantoms {
        #[arg(long)]
        count: usize,
        /// Index of the first phantom.
        #[arg(long, default_value_t = 0)]
        first: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue the checkpoint already in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Sample volumes conditioned on masks from a dataset or a label file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Samples per mask.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a synthetic dataset with a real one.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one segmentation model per mixture of an experiment.
    SegTrain {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the models of an experiment and print the comparison table.
    SegEval {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the configured noise schedule.
    ValidateSchedule {
        /// Print every timestep's coefficients.
        #[arg(long)]
        table: bool,
    },
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("{THREADS_VAR}={v:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = resolve_config(cli.preset, cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenPhantoms { count, first, out } => {
            let manifest = voxdiff_cli::gen_phantoms(&cfg, count, first, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { data, out, resume } => {
            let r = voxdiff_cli::train_cmd(&cfg, &data, &out, resume)?;
            println!("final loss {:.6} after {} steps", r.final_loss, r.steps_run);
            println!("{}", r.checkpoint.display());
        }
        Command::Sample { checkpoint, masks, count, out } => {
            let manifest = voxdiff_cli::sample_cmd(&cfg, &checkpoint, &masks, count, &out)?;
            println!("{}", manifest.display());
        }
        Command::Evaluate { real, synth, out } => {
            print!("{}", voxdiff_cli::evaluate_cmd(&cfg, &real, &synth, &out)?.to_text());
        }
        Command::SegTrain { experiment, out } => {
            for (name, loss) in voxdiff_cli::seg_train_cmd(&cfg, &experiment, &out)? {
                println!("{name}: final loss {loss:.6}");
            }
        }
        Command::SegEval { experiment, out } => {
            print!("{}", voxdiff_cli::seg_eval_cmd(&cfg, &experiment, &out)?);
        }
        Command::ValidateSchedule { table } => {
            print!("{}", voxdiff_cli::validate_schedule(&cfg, table)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
