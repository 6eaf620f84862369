//! `weather-gan` command-line driver.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running.

mod commands;
mod run_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "weather-gan", version, about = "Multi-domain unpaired weather translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan ROOT/<class>/... and write a manifest skeleton without cue boxes.
    Prepare {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        manifest_out: PathBuf,
    },
    /// Train a generator pair from a run file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate images with a trained checkpoint over a sweep of intensities.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// An image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated intensities in [0, 1].
        #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
        alpha: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the input, initial translation, attention, translation
        /// map and one map per cue class.
        #[arg(long)]
        dump_intermediates: bool,
        /// Use the reverse generator (domain Y to X).
        #[arg(long)]
        reverse: bool,
    },
    /// FID and KID between two image directories.
    Evaluate {
        #[arg(long)]
        real_dir: PathBuf,
        #[arg(long)]
        fake_dir: PathBuf,
        /// Pretrained VGG19 weights (safetensors). Without them a seeded
        /// random feature network is used.
        #[arg(long)]
        extractor_weights: Option<PathBuf>,
        /// Square side length images are resized to.
        #[arg(long, default_value_t = 300)]
        image_size: usize,
        #[arg(long, default_value_t = 100)]
        kid_subsets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "metrics.txt")]
        report_out: PathBuf,
    },
    /// Train with one branch configuration and optionally translate afterwards.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// full, attention_only, segmentation_only or init_only.
        #[arg(long)]
        mode: String,
        /// Images to translate with the final checkpoint.
        #[arg(long, requires = "out")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        out: Option<PathBuf>,
    },
}

/// A command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Prepare { root, manifest_out } => commands::prepare(&root, &manifest_out),
        Command::Train { config, resume } => commands::train(&config, resume.as_deref(), None),
        Command::Translate {
            checkpoint,
            input,
            alpha,
            out,
            dump_intermediates,
            reverse,
        } => commands::parse_alphas(&alpha)
            .and_then(|alphas| commands::translate(&checkpoint, &input, &alphas, &out, dump_intermediates, reverse)),
        Command::Evaluate {
            real_dir,
            fake_dir,
            extractor_weights,
            image_size,
            kid_subsets,
            seed,
            report_out,
        } => commands::evaluate(
            &real_dir,
            &fake_dir,
            extractor_weights,
            image_size,
            kid_subsets,
            seed,
            &report_out,
        ),
        Command::Ablate {
            config,
            mode,
            input,
            out,
        } => commands::ablate(&config, &mode, input.as_deref().zip(out.as_deref())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
