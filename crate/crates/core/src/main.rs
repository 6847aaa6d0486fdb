use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tas::commands;
use tas::config::TasConfig;
use tas::{Result, TasError};

#[derive(Parser)]
#[command(name = "tas", version, about = "AU intensity estimation from keyframe annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<TasConfig> {
        let mut cfg = match &self.config {
            Some(p) => TasConfig::load(p)?,
            None => TasConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Detect keyframes and write keyframe and segment manifests.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Directory of annotation CSV files (default: config `annotations_dir`).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Root of `<subject>/<sequence>/<frame>.png` images (default: config `frames_dir`).
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Train on a segment manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// `segments.json` written by `prepare`.
        #[arg(long)]
        segments: PathBuf,
    },
    /// Evaluate a checkpoint on densely labelled sequences.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Write predicted vs. labelled intensity curves for one sequence and AU.
    PlotTrends {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation CSV of the sequence.
        #[arg(long)]
        annotation: PathBuf,
        /// AU column name (e.g. `AU2`) or class index.
        #[arg(long)]
        au: String,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Export per-frame AU features as an .npy matrix with a CSV index.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Generate the synthetic benchmark.
    MakeSynth {
        #[command(flatten)]
        common: Common,
    },
}

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| TasError::Config(format!("no {what} given (flag or config)")))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common, annotations, frames } => {
            let cfg = common.load()?;
            let annotations = pick(&annotations, &cfg.annotations_dir, "annotations directory")?;
            let frames = pick(&frames, &cfg.frames_dir, "frames directory")?;
            let summary = commands::cmd_prepare(&annotations, &frames, &common.out, &cfg)?;
            println!(
                "{} sequences, {} keyframes, {} segments, annotation budget {:.2}%",
                summary.sequences,
                summary.keyframes,
                summary.segments,
                100.0 * summary.annotation_budget
            );
        }
        Command::Train { common, segments } => {
            let cfg = common.load()?;
            let outcome = commands::cmd_train(&segments, &common.out, &cfg)?;
            println!(
                "kept epoch {} (validation ICC {}); checkpoint at {}",
                outcome.best_epoch,
                outcome.best_val_icc.map_or("n/a".into(), |v| format!("{v:.4}")),
                common.out.join(commands::CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { common, checkpoint, annotations, frames } => {
            let cfg = common.load()?;
            let annotations = pick(&annotations, &cfg.annotations_dir, "annotations directory")?;
            let frames = pick(&frames, &cfg.frames_dir, "frames directory")?;
            print_json(&commands::cmd_eval(&checkpoint, &annotations, &frames, &common.out, &cfg)?)?;
        }
        Command::PlotTrends { common, checkpoint, annotation, au, frames } => {
            let cfg = common.load()?;
            let frames = pick(&frames, &cfg.frames_dir, "frames directory")?;
            let curve = commands::cmd_plot_trends(&checkpoint, &annotation, &au, &frames, &common.out, &cfg)?;
            println!("{} frames written to {}", curve.frames.len(), common.out.display());
        }
        Command::ExportFeatures { common, checkpoint, annotations, frames } => {
            let cfg = common.load()?;
            let annotations = pick(&annotations, &cfg.annotations_dir, "annotations directory")?;
            let frames = pick(&frames, &cfg.frames_dir, "frames directory")?;
            let export = commands::cmd_export_features(&checkpoint, &annotations, &frames, &common.out, &cfg)?;
            println!("{} x {} feature matrix written to {}", export.rows, export.cols, common.out.display());
        }
        Command::MakeSynth { common } => {
            let cfg = common.load()?;
            let manifest = commands::cmd_make_synth(&common.out, &cfg)?;
            println!(
                "{} sequences, {} files written to {}",
                manifest.sequences.len(),
                manifest.files.len(),
                Path::new(&common.out).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
