use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rockseg::commands::{cmd_evaluate, cmd_infer, cmd_prepare, cmd_train};
use rockseg::config::PipelineConfig;
use rockseg::imaging::BlendWindow;
use rockseg::training::{DataSource, SourceTag};
use rockseg::Result;

#[derive(Parser)]
#[command(
    name = "rockseg",
    version,
    about = "Fine-tune and run a promptable segmenter on grayscale rock images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Cut raw images and masks into selected training patches.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Derive masks from the images by IsoData thresholding.
        #[arg(long)]
        isodata: bool,
        /// Raw image directory, added as a source alongside the config's.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        masks: Option<PathBuf>,
        #[arg(long, default_value = "CT", requires = "images", value_parser = parse_tag)]
        tag: SourceTag,
    },
    /// Fine-tune the mask decoder on the prepared dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Prepared dataset directory (overrides the config).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Segment an image or every image in a directory.
    Infer {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        /// Checkpoint directory; defaults to `<out>/best`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// `unit` or `hann_squared`.
        #[arg(long)]
        window: Option<BlendWindow>,
    },
    /// Score predicted masks against filename-matched ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        predictions: PathBuf,
        truths: PathBuf,
    },
}

fn parse_tag(s: &str) -> std::result::Result<SourceTag, String> {
    match s {
        "CT" | "ct" => Ok(SourceTag::Ct),
        "SEM" | "sem" => Ok(SourceTag::Sem),
        _ => Err(format!("unknown tag '{s}', expected CT or SEM")),
    }
}

fn base_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load_or_default(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Prepare {
            common,
            isodata,
            images,
            masks,
            tag,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.dataset.options.isodata |= isodata;
            if let Some(images) = images {
                cfg.dataset.sources.push(DataSource { images, masks, tag });
            }
            let cfg = cfg.finalize()?;
            let summary = cmd_prepare(&cfg)?;
            for (tag, n) in &summary.selected_per_tag {
                let cands = summary.candidates_per_tag.get(tag).copied().unwrap_or(0);
                println!("{tag}: kept {n} of {cands} patches");
            }
            println!("prepared dataset in {}", cfg.prepared_dir().display());
        }
        Command::Train {
            common,
            workers,
            epochs,
            dataset,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(w) = workers {
                cfg.train.workers = w;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            if dataset.is_some() {
                cfg.dataset.prepared = dataset;
            }
            let cfg = cfg.finalize()?;
            let res = cmd_train(&cfg)?;
            for r in &res.state.history {
                println!(
                    "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}",
                    r.epoch, r.train_loss, r.val_loss, r.lr
                );
            }
            println!(
                "best epoch {} (val {:.5}), checkpoint {}",
                res.state.best_epoch.unwrap_or(0),
                res.state.best_val_loss,
                res.best_checkpoint.display()
            );
        }
        Command::Infer {
            common,
            input,
            checkpoint,
            stride,
            threshold,
            window,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(s) = stride {
                cfg.tiling.stride = s;
            }
            if let Some(t) = threshold {
                cfg.tiling.threshold = t;
            }
            if let Some(w) = window {
                cfg.tiling.window = w;
            }
            let cfg = cfg.finalize()?;
            let report = cmd_infer(&cfg, &input, checkpoint.as_deref())?;
            for r in &report.processed {
                println!(
                    "{}: {}x{}, {} patches, foreground {:.4}",
                    r.name, r.height, r.width, r.patches, r.foreground_fraction
                );
            }
            for (path, why) in &report.failed {
                eprintln!("failed {}: {why}", path.display());
            }
            println!("outputs in {}", report.output_dir.display());
            return Ok(report.exit_code());
        }
        Command::Evaluate {
            common,
            predictions,
            truths,
        } => {
            let cfg = base_config(&common)?;
            let report = cmd_evaluate(&predictions, &truths, &cfg.out)?;
            report
                .write_table(&mut std::io::stdout().lock())
                .map_err(|e| rockseg::Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
