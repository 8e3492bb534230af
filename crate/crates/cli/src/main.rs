//! `mcl`: desk-scale motion cloning on a toy video diffusion model.
//!
//! Typical flow: `gen-data` renders a synthetic dataset, `train` fits the
//! denoiser, `extract` pulls a motion representation from a reference clip,
//! `sample` generates clips with that motion as guidance, `eval` scores a
//! clip against ground truth, `ablate` sweeps guidance settings and `demo`
//! renders a side-by-side comparison.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcl_core::error::{Error, Result};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "mcl", version, about = "Motion cloning on a desk-scale video diffusion model")]
struct Cli {
    /// key=value config file applied over the defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Guidance mode
    #[arg(long, global = true, value_parser = ["off", "plain", "primary", "inversion_1"])]
    mode: Option<String>,
    /// Top-k mask size
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Extraction step
    #[arg(long = "t-alpha", global = true)]
    t_alpha: Option<usize>,
    /// Attention block carrying the guidance
    #[arg(long, global = true)]
    block: Option<String>,
    /// Motion-guidance weight
    #[arg(long, global = true)]
    lambda: Option<f32>,
    /// Classifier-free guidance weight
    #[arg(long = "cfg-scale", global = true)]
    cfg_scale: Option<f32>,
    /// camera, object or N,M (total steps, guided steps)
    #[arg(long, global = true)]
    schedule: Option<String>,
    /// Output root for run directories
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with motion ground truth
    GenData {
        /// Clips per motion class
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the denoiser on a generated dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Extract a motion representation (or trajectory) from a reference clip
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Clip id within --data
        #[arg(long)]
        id: Option<String>,
        /// Clip tensor file (alternative to --data/--id)
        #[arg(long)]
        clip: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Dense plain-control representation
        #[arg(long)]
        plain: bool,
        /// Per-step trajectory for inversion_1 sampling
        #[arg(long)]
        trajectory: bool,
    },
    /// Sample a clip, optionally under motion guidance
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Representation or trajectory directory (for mode != off)
        #[arg(long)]
        rep: Option<PathBuf>,
        /// Condition class id (0 = null token)
        #[arg(long)]
        class: Option<u32>,
    },
    /// Score a clip against a reference truth file
    Eval {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Sweep one guidance axis and emit a results table
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// k, t-alpha, block or mode
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values
        #[arg(long)]
        grid: String,
        /// Comma-separated reference clip ids (default: first usable pan)
        #[arg(long)]
        refs: Option<String>,
    },
    /// Side-by-side reference / unguided / plain / primary comparison
    Demo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        clip: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.apply_key("mode", mode)?;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if let Some(t) = cli.t_alpha {
        cfg.t_alpha = t;
    }
    if let Some(b) = &cli.block {
        cfg.block = b.clone();
    }
    if let Some(l) = cli.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = cli.cfg_scale {
        cfg.cfg_scale = s;
    }
    if let Some(s) = &cli.schedule {
        cfg.apply_key("schedule", s)?;
    }
    if let Ok(threads) = std::env::var("MCL_THREADS") {
        cfg.threads = threads
            .parse()
            .map_err(|_| Error::Config(format!("MCL_THREADS has unparsable value {threads:?}")))?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    let out = cli.out.clone();
    match &cli.cmd {
        Cmd::GenData { count } => commands::cmd_gen_data(&cfg, &out, *count),
        Cmd::Train { data, steps } => commands::cmd_train(&cfg, &out, data, *steps),
        Cmd::Extract { checkpoint, data, id, clip, truth, plain, trajectory } => {
            commands::cmd_extract(
                &cfg,
                &out,
                checkpoint,
                data.as_deref(),
                id.as_deref(),
                clip.as_deref(),
                truth.as_deref(),
                *plain,
                *trajectory,
            )
        }
        Cmd::Sample { checkpoint, rep, class } => {
            if let Some(c) = class {
                cfg.sample_class = *c;
            }
            commands::cmd_sample(&cfg, &out, checkpoint, rep.as_deref())
        }
        Cmd::Eval { clip, truth } => commands::cmd_eval(&cfg, &out, clip, truth),
        Cmd::Ablate { checkpoint, data, axis, grid, refs } => {
            commands::cmd_ablate(&cfg, &out, checkpoint, data, axis, grid, refs.as_deref())
        }
        Cmd::Demo { checkpoint, data, id, clip, truth } => commands::cmd_demo(
            &cfg,
            &out,
            checkpoint,
            data.as_deref(),
            id.as_deref(),
            clip.as_deref(),
            truth.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mcl-error kind={} msg={:?}", e.kind(), e.to_string());
            let code = match e.kind() {
                "config" | "block" => 2,
                "io" => 3,
                "container" | "manifest" => 4,
                "numeric" => 5,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
