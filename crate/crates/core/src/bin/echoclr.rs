use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use echoclr::data::{generate_synthetic, load_manifest, Split, SyntheticConfig};
use echoclr::engine::{self, evaluate::evaluate_checkpoint, load_checkpoint, RawConfig, RunPaths, Task};
use echoclr::{Error, Result};

#[derive(Parser)]
#[command(name = "echoclr", version, about = "Self-supervised pretraining and segmentation fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic echo-like dataset and its manifest.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        patients: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side length of the generated frames in pixels.
        #[arg(long, default_value_t = 112)]
        size: usize,
    },
    /// Run SimCLR or BYOL pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a segmentation network, optionally from a pretrained backbone.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Score a segmentation checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pretraining × network × fraction grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(format!("resolving {}", p.display()), e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen {
            out,
            patients,
            frames,
            seed,
            size,
        } => {
            let cfg = SyntheticConfig {
                num_patients: patients,
                frames_per_video: frames,
                image_size: size,
                seed,
            };
            let m = generate_synthetic(&cfg, &out)?;
            println!("wrote {} frames to {}", m.records.len(), out.join("manifest.csv").display());
        }
        Command::Pretrain { config } => {
            let cfg = RawConfig::load(&config)?.resolve()?;
            if !cfg.task.is_pretext() {
                return Err(Error::BadConfig(format!("pretrain needs task simclr or byol, got {}", cfg.task)));
            }
            let ckpt = engine::run_task(&cfg)?;
            report_run(&cfg.out_dir, ckpt.epoch, ckpt.best);
        }
        Command::Finetune {
            config,
            backbone,
            fraction,
        } => {
            let mut raw = RawConfig::load(&config)?;
            if raw.get("task").is_none() {
                raw.set("task", Task::Segment);
            }
            if let Some(b) = backbone {
                raw.set("backbone", absolute(&b)?.display());
            }
            if let Some(f) = fraction {
                raw.set("fraction", f);
            }
            let cfg = raw.resolve()?;
            if cfg.task != Task::Segment {
                return Err(Error::BadConfig(format!("finetune needs task segment, got {}", cfg.task)));
            }
            let ckpt = engine::run_task(&cfg)?;
            report_run(&cfg.out_dir, ckpt.epoch, ckpt.best);
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let manifest = load_manifest(&manifest)?;
            let report = evaluate_checkpoint(&ckpt, &manifest, split, Some(&out))?;
            println!(
                "{split}: n={} dice_mean={:.4} dice_sd={:.4}",
                report.per_image.len(),
                report.mean,
                report.sd
            );
        }
        Command::Grid { config, out } => {
            let raw = RawConfig::load(&config)?;
            let rows = engine::run_grid(&raw, &out)?;
            for r in &rows {
                println!(
                    "{:<7} {:<10} {:>5} {:.4} ({:.4})",
                    r.pretraining, r.network, r.fraction, r.dice_mean, r.dice_sd
                );
            }
            println!("table: {}", out.join("grid.csv").display());
        }
    }
    Ok(())
}

fn report_run(out_dir: &Path, epochs: u64, best: Option<f64>) {
    let paths = RunPaths::new(out_dir);
    println!("trained {epochs} epochs; best selection metric {}", best.map_or("n/a".into(), |b| format!("{b:.6}")));
    println!("best checkpoint: {}", paths.best.display());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
