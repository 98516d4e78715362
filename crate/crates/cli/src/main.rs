mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use woundseg::Error;

use crate::commands::PredictOptions;
use crate::config::RunConfig;

/// Wound segmentation pipeline.
///
/// Settings come from built-in defaults, then the config file, then each
/// `--set` in order. Run `woundseg config` to list every key with its value.
#[derive(Parser)]
#[command(name = "woundseg", version)]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true, env = "WOUNDSEG_CONFIG")]
    config: Option<PathBuf>,

    /// Override one setting, e.g. `--set train.patience=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop annotated boxes out of raw images and pad them to a square.
    Prepare {
        #[arg(long)]
        images: PathBuf,
        /// CSV with `filename,x_min,y_min,x_max,y_max` (inclusive pixels).
        #[arg(long)]
        bboxes: PathBuf,
        /// Full-size masks named like the images.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Sample count (synth.count).
        #[arg(long)]
        count: Option<usize>,
        /// Generator and split seed (synth.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Image side in pixels (synth.image_size).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train on a dataset with a manifest, keeping the best epoch.
    Train {
        #[arg(long, required_unless_present = "describe")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "describe")]
        out: Option<PathBuf>,
        /// Print the resolved layout and parameter count, then exit.
        #[arg(long)]
        describe: bool,
    },
    /// Segment images with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files or directories.
        #[arg(long, num_args = 1.., required_unless_present = "data")]
        images: Vec<PathBuf>,
        /// Dataset directory; predicts the images of `--split`.
        #[arg(long, conflicts_with = "images")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val", requires = "data")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Write thresholded masks without hole filling or region removal.
        #[arg(long)]
        no_postprocess: bool,
        /// Also write inputs with the mask boundary drawn.
        #[arg(long)]
        overlays: bool,
    },
    /// Threshold and clean grayscale masks.
    Postprocess {
        /// Mask files or directories.
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth with matching names.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score only the predicted names; extra ground truth is ignored.
        #[arg(long)]
        pred_only: bool,
    },
    /// Print every setting with its effective value.
    Config,
}

fn load_config(cli: &Cli) -> woundseg::Result<RunConfig> {
    let mut cfg = RunConfig::new();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Prepare {
            images,
            bboxes,
            masks,
            out,
        } => commands::prepare(&cfg, &images, &bboxes, masks.as_deref(), &out),
        Command::Synth { out, count, seed, size } => {
            if let Some(n) = count {
                cfg.synth_count = n;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(s) = size {
                cfg.synth.image_size = s;
            }
            commands::synth(&cfg, &out)
        }
        Command::Train { data, out, describe } => match (describe, data, out) {
            (true, _, _) => commands::describe(&cfg.model),
            (false, Some(data), Some(out)) => commands::train(&cfg, &data, &out),
            _ => Err(Error::Usage("train needs --data and --out".into()).into()),
        },
        Command::Predict {
            checkpoint,
            images,
            data,
            split,
            out,
            no_postprocess,
            overlays,
        } => {
            let images = match data {
                Some(d) => commands::split_images(&d, &split)?,
                None => images,
            };
            commands::predict(
                &cfg,
                PredictOptions {
                    checkpoint: &checkpoint,
                    images,
                    out: &out,
                    postprocess: !no_postprocess,
                    overlays,
                },
            )
        }
        Command::Postprocess { input, out } => commands::postprocess(&cfg, &input, &out),
        Command::Evaluate {
            pred,
            gt,
            out,
            pred_only,
        } => commands::evaluate(&cfg, &pred, &gt, &out, pred_only),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

/// 2 for bad input, 3 for runtime and format failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Argument(_) | Error::Config(_) | Error::Dimension(_) | Error::Usage(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
