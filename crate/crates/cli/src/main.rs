//! `countconf`: batch front end for factor scoring, Jaccard labeling, the
//! hypothesis harness and the confidence model.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use countconf_core::{ErrorClass, PipelineConfig};

#[derive(Parser)]
#[command(name = "countconf", version, about = "Counting-confidence pipeline for trap-image pest counts")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-image work.
    #[arg(long, global = true, env = "COUNTCONF_THREADS")]
    threads: Option<usize>,

    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Canned {
    SingleVariable,
    Confidence,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus with manifest, ground truth and detections.
    Synth {
        #[arg(long, required_unless_present = "canned", conflicts_with = "canned")]
        plan: Option<PathBuf>,
        #[arg(long, value_enum)]
        canned: Option<Canned>,
        /// Image count for the canned confidence corpus.
        #[arg(long, default_value_t = 400)]
        images: u32,
    },
    /// Compute the six factor scores per image.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        niqe_model: Option<PathBuf>,
    },
    /// Per-image TP/FP/FN and Jaccard labels plus the corpus summary.
    Label {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Write the corpus summary JSON here instead of printing it.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Hypothesis tests for the quality and complexity metrics.
    Analyze {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Extra quality metrics, `image_path,<metric>...`.
        #[arg(long)]
        external_iqa: Vec<PathBuf>,
        /// Extra complexity metrics, `image_path,<metric>...`.
        #[arg(long)]
        external_ica: Vec<PathBuf>,
        /// External columns where lower means more (negated before testing).
        #[arg(long)]
        negate: Vec<String>,
        #[arg(long)]
        no_normalize: bool,
    },
    /// Fit the confidence model on a train split and report train/test error.
    Fit {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Append predicted confidence to a scores CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Per-factor ablation table on a train/test split.
    Ablate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also write the full table, train errors included, as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also write normalized factor scores against confidence.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Score, label, analyze, fit and ablate a corpus directory in one go.
    Report {
        /// Directory holding manifest.csv, detections.json and ground_truth.json.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        niqe_model: Option<PathBuf>,
    },
    /// Fit a pristine NIQE model from sharp, clean images.
    NiqeFit {
        /// Directory of PNG images.
        #[arg(long, required_unless_present = "pristine", conflicts_with = "pristine")]
        images: Option<PathBuf>,
        /// Use this many synthetic pristine scenes instead.
        #[arg(long)]
        pristine: Option<usize>,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Validation => 1,
        ErrorClass::Io => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

/// Config file (or defaults) with the global flags applied on top.
fn effective_config(cli: &Cli) -> countconf_core::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}
