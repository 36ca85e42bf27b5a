//! Command line front end: dataset synthesis, training, evaluation, overlay
//! prediction, parameter accounting, gradient verification, and the attention
//! runtime comparison, all in one binary.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 data or IO
//! failure, 4 training divergence, 5 gradient check failure.

mod commands;
mod overlay;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fuseseg::error::Error;

#[derive(Parser)]
#[command(name = "fuseseg", version, about = "Skin lesion segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON run config; writes checkpoints, log, and config echo.
    Train {
        /// Path to the run config JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root containing images/ and masks/.
        #[arg(long)]
        data: PathBuf,
        /// Which split to score: train, val, or test.
        #[arg(long)]
        split: String,
        /// Directory for metrics.json.
        #[arg(long = "out-dir", default_value = ".")]
        out_dir: PathBuf,
    },
    /// Segment one image and write a contour overlay plus the raw mask.
    Predict {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (jpg or png).
        #[arg(long)]
        image: PathBuf,
        /// Optional ground-truth mask to outline in green.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Overlay output path; the raw mask lands next to it as <stem>_mask.png.
        #[arg(long)]
        out: PathBuf,
        /// Probability cutoff for the predicted mask.
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Generate a synthetic lesion dataset.
    #[command(name = "synth-data")]
    SynthData {
        /// Directory to create images/ and masks/ in.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Square image side length.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the linear attention against the dense quadratic reference.
    #[command(name = "bench-attention")]
    BenchAttention {
        /// Comma-separated token counts, each at least 64.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        tokens: Vec<usize>,
        /// Feature dimension.
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Timed runs per kernel per token count; the median is reported.
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        /// Seed for the random operands.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional file to write the CSV to (it always prints to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients against finite differences.
    Gradcheck {
        /// "full" for the whole suite, or a single case name.
        #[arg(long, default_value = "full")]
        scope: String,
        /// Random seeds per case.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Print trainable parameter counts with and without the fusion module.
    Params {
        /// Optional run config JSON; defaults to the full-scale model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Shape { .. } => 2,
        Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Image(_) => 3,
        Error::Divergence { .. } | Error::Numeric { .. } => 4,
        Error::GradCheck(_) => 5,
    }
}

fn main() -> ExitCode {
    // Die quietly on a closed pipe (e.g. `fuseseg params | head`) instead of
    // panicking inside println.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train { config } => commands::cmd_train(config),
        Cmd::Eval { ckpt, data, split, out_dir } => commands::cmd_eval(ckpt, data, split, out_dir),
        Cmd::Predict { ckpt, image, mask, out, threshold } => {
            commands::cmd_predict(ckpt, image, mask.as_deref(), out, *threshold)
        }
        Cmd::SynthData { out_dir, count, size, seed } => {
            commands::cmd_synth_data(out_dir, *count, *size, *seed)
        }
        Cmd::BenchAttention { tokens, dim, repeats, seed, out } => {
            commands::cmd_bench_attention(tokens, *dim, *repeats, *seed, out.as_deref())
        }
        Cmd::Gradcheck { scope, seeds } => commands::cmd_gradcheck(scope, *seeds),
        Cmd::Params { config } => commands::cmd_params(config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
