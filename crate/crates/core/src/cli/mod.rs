//! The `pathvl` command line. Every subcommand reads and writes JSON lines
//! (plus PPM/PGM rasters, embedding stores and checkpoints) and writes a
//! `.meta.json` sidecar recording the full invocation. File layouts are
//! described in `docs/FORMATS.md`.

mod commands;
mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::wsi::TileInclusion;

const EXIT_CODES: &str = "\
Exit codes:
   0  success
   2  usage error (bad or missing flags, empty input)
   3  invalid argument        4  shape mismatch
   5  numerical error         6  format error
   7  corrupt data            8  unknown key
   9  invalid configuration  10  slide has no tiles
  11  metric undefined       12  training diverged
  13  consistency violation  14  i/o error
  15  json error";

#[derive(Parser, Debug)]
#[command(
    name = "pathvl",
    version,
    about = "Visual-language toolkit for synthetic histopathology",
    after_help = EXIT_CODES
)]
pub struct Cli {
    /// Seed for every random draw; recorded in each output's metadata.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate ROI pairs and slide specifications.
    Synth(SynthArgs),
    /// Train the toy image-text model on ROI pairs.
    TrainCoca(TrainCocaArgs),
    /// Embed ROI images, or tile and embed slides.
    Embed(EmbedArgs),
    /// Zero-shot classify ROI embeddings.
    ClassifyRoi(ClassifyRoiArgs),
    /// Zero-shot classify slides by top-K pooling.
    ClassifySlide(ClassifySlideArgs),
    /// Zero-shot segmentation with overlapping tiles.
    Segment(SegmentArgs),
    /// Text-to-image retrieval.
    Retrieve(RetrieveArgs),
    /// Sample captions, optionally after captioning fine-tuning.
    Caption(CaptionArgs),
    /// Train an attention-MIL slide classifier.
    TrainMil(TrainMilArgs),
    /// Fit and apply a logistic-regression linear probe.
    Probe(ProbeArgs),
    /// Few-shot ABMIL sweep over labels per class.
    Fewshot(FewshotArgs),
    /// Metrics with bootstrap confidence intervals.
    Eval(EvalArgs),
    /// Paired permutation tests and few-shot summaries.
    Stats(StatsArgs),
    /// Tissue masks by saturation thresholding.
    SegmentTissue(SegmentTissueArgs),
    /// Tile grids over detected tissue.
    Tile(TileArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::TrainCoca(_) => "train-coca",
            Command::Embed(_) => "embed",
            Command::ClassifyRoi(_) => "classify-roi",
            Command::ClassifySlide(_) => "classify-slide",
            Command::Segment(_) => "segment",
            Command::Retrieve(_) => "retrieve",
            Command::Caption(_) => "caption",
            Command::TrainMil(_) => "train-mil",
            Command::Probe(_) => "probe",
            Command::Fewshot(_) => "fewshot",
            Command::Eval(_) => "eval",
            Command::Stats(_) => "stats",
            Command::SegmentTissue(_) => "segment-tissue",
            Command::Tile(_) => "tile",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Quick,
    Standard,
}

impl Preset {
    pub fn config(self, seed: u64) -> PipelineConfig {
        match self {
            Preset::Quick => PipelineConfig::quick(seed),
            Preset::Standard => PipelineConfig::standard(seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Inclusion {
    Center,
    Area,
}

impl From<Inclusion> for TileInclusion {
    fn from(i: Inclusion) -> Self {
        match i {
            Inclusion::Center => TileInclusion::Center,
            Inclusion::Area => TileInclusion::Area,
        }
    }
}

/// Slides given as a PPM image or as generator specifications.
#[derive(Args, Debug, Clone, Serialize)]
pub struct SlideInput {
    /// Slide raster (PPM).
    #[arg(long, conflicts_with = "slides")]
    pub image: Option<PathBuf>,
    /// Slide specifications, one JSON object per line (from `synth`).
    #[arg(long)]
    pub slides: Option<PathBuf>,
    /// Keep only this slide from `--slides`; names the slide for `--image`.
    #[arg(long)]
    pub slide_id: Option<String>,
    /// Slide-level class for `--image`.
    #[arg(long, requires = "image")]
    pub label: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Quick)]
    pub preset: Preset,
    /// Also render every slide as a PPM under `slides/`.
    #[arg(long)]
    pub render_slides: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainCocaArgs {
    /// Training pairs (`train.jsonl` from `synth`).
    #[arg(long)]
    pub pairs: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Model size and optimiser defaults.
    #[arg(long, value_enum, default_value_t = Preset::Quick)]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// ROI pairs to embed into a features file.
    #[arg(long, conflicts_with_all = ["image", "slides"])]
    pub pairs: Option<PathBuf>,
    #[command(flatten)]
    pub input: SlideInput,
    /// Features file (with `--pairs`) or output directory (slides).
    #[arg(long)]
    pub out: PathBuf,
    /// Tile side in slide pixels.
    #[arg(long, default_value_t = 256)]
    pub tile: usize,
    #[arg(long, value_enum, default_value_t = Inclusion::Center)]
    pub inclusion: Inclusion,
    /// Class order for slide labels.
    #[arg(long, value_delimiter = ',', default_value = "DEB,LYM,MUC,NORM,TUM")]
    pub classes: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct PromptArgs {
    /// Built-in prompt set name or path to a prompt-set JSON file.
    #[arg(long, default_value = "crc100k")]
    pub prompts: String,
}

#[derive(Args, Debug, Serialize)]
pub struct ClassifyRoiArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Features file from `embed --pairs`.
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub prompts: PromptArgs,
    /// Classes to score, in output order (default: the prompt classes present
    /// among labelled features, or the whole prompt set).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ClassifySlideArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `manifests.jsonl` from `embed`.
    #[arg(long)]
    pub manifests: PathBuf,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[arg(long, value_delimiter = ',', default_value = "DEB,LYM,MUC,NORM,TUM")]
    pub classes: Vec<String>,
    /// Candidate K values for top-K pooling.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,50,100")]
    pub ks: Vec<usize>,
    /// Report this K instead of selecting the best K on labelled slides.
    #[arg(long)]
    pub k: Option<usize>,
    /// Write a heatmap of the predicted class per slide into this directory.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SegmentArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: SlideInput,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[arg(long, value_delimiter = ',', default_value = "NORM,TUM")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 224)]
    pub tile: usize,
    #[arg(long, default_value_t = 0.75)]
    pub overlap: f64,
    /// Class index scored by Dice against generator ground truth.
    #[arg(long, default_value_t = 1)]
    pub positive: u8,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Features file with captions; captions query the images.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Use only the first N pairs.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CaptionArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pairs to caption; their captions are the references.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub top_k: usize,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Fine-tune for captioning on these pairs first.
    #[arg(long, requires = "val")]
    pub finetune: Option<PathBuf>,
    /// Validation pairs for early stopping on ROUGE-1.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Save the fine-tuned checkpoint here.
    #[arg(long, requires = "finetune")]
    pub save_model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct MilScheduleArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainMilArgs {
    /// Labelled `manifests.jsonl` from `embed`.
    #[arg(long)]
    pub manifests: PathBuf,
    /// Class count (default: largest label + 1).
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[command(flatten)]
    pub schedule: MilScheduleArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeArgs {
    /// Training features (with classes).
    #[arg(long)]
    pub train: PathBuf,
    /// Features to predict.
    #[arg(long)]
    pub test: PathBuf,
    /// Class order (default: sorted training classes).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    /// Regularisation strength (default 100 / (M·C)).
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 800)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FewshotArgs {
    /// Labelled pool to draw training slides from.
    #[arg(long)]
    pub train_manifests: PathBuf,
    #[arg(long)]
    pub test_manifests: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub shots: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub replicates: usize,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[command(flatten)]
    pub schedule: MilScheduleArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Prediction lines with `truth`, `predicted` and optional `scores`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Metric table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricName {
    Accuracy,
    BalancedAccuracy,
    WeightedF1,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    /// Predictions of the first system.
    #[arg(long, requires = "b", conflicts_with = "fewshot")]
    pub a: Option<PathBuf>,
    /// Predictions of the second system on the same items.
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// Few-shot records to summarise per labels-per-class count.
    #[arg(long)]
    pub fewshot: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricName::BalancedAccuracy)]
    pub metric: MetricName,
    #[arg(long, default_value_t = 1000)]
    pub permutations: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SegmentTissueArgs {
    #[command(flatten)]
    pub input: SlideInput,
    #[arg(long, default_value_t = 20)]
    pub sat_threshold: u8,
    #[arg(long, default_value_t = 7)]
    pub median_kernel: usize,
    #[arg(long, default_value_t = 7)]
    pub close_kernel: usize,
    #[arg(long, default_value_t = 64)]
    pub min_area: usize,
    #[arg(long, default_value_t = 8)]
    pub downsample: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TileArgs {
    #[command(flatten)]
    pub input: SlideInput,
    #[arg(long, default_value_t = 256)]
    pub side: usize,
    /// Overlapping grid with this fraction of overlap (segmentation style).
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long, value_enum, default_value_t = Inclusion::Center)]
    pub inclusion: Inclusion,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(Error::Usage("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| commands::dispatch(&cli))
}
