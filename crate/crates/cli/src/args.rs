use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tmeseg_core::synth::SceneParams;

#[derive(Debug, Parser)]
#[command(name = "tmeseg", version, about = "Teacher aggregation and tumor-microenvironment analytics for histology rasters")]
pub struct Cli {
    /// Run configuration (JSON); unset keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Taxonomy overriding the built-in vocabulary.
    #[arg(long, global = true, value_name = "FILE")]
    pub taxonomy: Option<PathBuf>,

    /// Worker threads (default: TMESEG_WORKERS, then one per core).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    /// Write the provenance record here instead of to standard error.
    #[arg(long, global = true, value_name = "FILE")]
    pub provenance: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse teacher outputs into a labelled mask
    Aggregate(AggregateArgs),
    /// Decode student logits into labels
    Postprocess(PostprocessArgs),
    /// Score predicted labels against ground truth
    Evaluate(EvaluateArgs),
    /// Count cells by components or calibrated area
    Count(CountArgs),
    /// Tumor-microenvironment metrics
    #[command(subcommand)]
    Tme(TmeCommand),
    /// Write a synthetic teacher bundle
    Synth(SynthArgs),
    /// Describe the containers in a file
    Info(InfoArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Aggregate(_) => "aggregate",
            Command::Postprocess(_) => "postprocess",
            Command::Evaluate(_) => "evaluate",
            Command::Count(_) => "count",
            Command::Tme(TmeCommand::Slide(_)) => "tme slide",
            Command::Tme(TmeCommand::Cohort(_)) => "tme cohort",
            Command::Synth(_) => "synth",
            Command::Info(_) => "info",
        }
    }

    /// Settings that shape the output, without file paths.
    pub fn params(&self) -> serde_json::Value {
        let v = match self {
            Command::Aggregate(a) => serde_json::to_value(a),
            Command::Postprocess(a) => serde_json::to_value(a),
            Command::Evaluate(a) => serde_json::to_value(a),
            Command::Count(a) => serde_json::to_value(a),
            Command::Tme(TmeCommand::Slide(a)) => serde_json::to_value(a),
            Command::Tme(TmeCommand::Cohort(a)) => serde_json::to_value(a),
            Command::Synth(a) => serde_json::to_value(a),
            Command::Info(a) => serde_json::to_value(a),
        };
        v.expect("arguments serialize")
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AggregateArgs {
    /// Teacher bundle (H&E, tissue and cell logits, nuclei, optional halo)
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub bundle: PathBuf,

    /// Output: labels and classified nuclei
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub out: PathBuf,

    /// Process window by window (plan from the config, else 384/320)
    #[arg(long)]
    pub tiled: bool,

    /// Halve both axes before aggregating
    #[arg(long)]
    pub downscale2: bool,

    /// Microns per pixel recorded on the output (default: from the bundle)
    #[arg(long)]
    pub mpp: Option<f64>,

    /// Per-nucleus decision records (JSON)
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub details: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Per-pixel argmax with leukocyte reassigned to its best subtype
    Force,
    /// One class per nucleus from summed logits
    Panoptic,
}

#[derive(Debug, Args, Serialize)]
pub struct PostprocessArgs {
    /// Student logits, one channel per vocabulary class
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub logits: PathBuf,

    /// Nucleus instances (panoptic mode)
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub nuclei: Option<PathBuf>,

    /// Admissible nucleus / non-nucleus class sets (JSON)
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub partition: Option<PathBuf>,

    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub out: PathBuf,

    #[arg(long, value_enum, default_value_t = DecodeMode::Force)]
    pub mode: DecodeMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Ground truth: nucleus instances and/or a label raster
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub gt: PathBuf,

    /// Predicted label raster
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub pred: PathBuf,

    /// Class map onto the evaluation vocabulary (default: identity)
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub map: Option<PathBuf>,

    /// Classes scored semantically (comma-separated; default: all)
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,

    /// JSON report file
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub out: Option<PathBuf>,

    /// What to print on standard output
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct CountArgs {
    /// Label raster to count in
    #[arg(long, value_name = "FILE", required_unless_present = "fit", conflicts_with = "fit")]
    #[serde(skip)]
    pub mask: Option<PathBuf>,

    /// Classes to count (repeatable; default: every non-background class)
    #[arg(long = "class", value_name = "NAME")]
    pub classes: Vec<String>,

    /// Mean pixel area per cell for area-based estimates
    #[arg(long, conflicts_with = "calibration")]
    pub mean_area: Option<f64>,

    /// Calibration table supplying the mean area per class
    #[arg(long, value_name = "FILE", requires = "dataset")]
    #[serde(skip)]
    pub calibration: Option<PathBuf>,

    /// Dataset key in the calibration table
    #[arg(long)]
    pub dataset: Option<String>,

    /// Fit a calibration from `pixel_area,reference_count` rows (CSV)
    #[arg(long, value_name = "FILE", requires_all = ["dataset", "out"])]
    #[serde(skip)]
    pub fit: Option<PathBuf>,

    /// Report (JSON) or, with --fit, the calibration table to create or update
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TmeCommand {
    /// Metrics for one slide mask
    Slide(TmeSlideArgs),
    /// Case metrics and gene associations across a cohort
    Cohort(TmeCohortArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TmeSlideArgs {
    /// Label raster
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub mask: PathBuf,

    /// Microns per pixel (default: from the mask header)
    #[arg(long)]
    pub mpp: Option<f64>,

    /// Margin band width in µm (default: from the config)
    #[arg(long)]
    pub margin_um: Option<f64>,

    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TmeCohortArgs {
    /// Cases, slides, mpp and mutation flags (JSON or CSV)
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub manifest: PathBuf,

    /// Genes to test (repeatable; default: every gene in the manifest)
    #[arg(long = "gene", value_name = "NAME")]
    pub genes: Vec<String>,

    /// Margin band width in µm (default: from the config)
    #[arg(long)]
    pub margin_um: Option<f64>,

    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub out_json: PathBuf,

    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub out_csv: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output bundle
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub out: PathBuf,

    /// Reference labels and nucleus classes for the bundle
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub expected: Option<PathBuf>,

    #[arg(long)]
    pub mpp: Option<f64>,

    #[arg(long, default_value_t = SceneParams::default().min_size)]
    pub min_size: usize,

    #[arg(long, default_value_t = SceneParams::default().max_size)]
    pub max_size: usize,

    #[arg(long, default_value_t = SceneParams::default().max_nuclei)]
    pub max_nuclei: usize,

    #[arg(long, default_value_t = SceneParams::default().max_candidates)]
    pub max_candidates: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct InfoArgs {
    #[serde(skip)]
    pub file: PathBuf,
}
