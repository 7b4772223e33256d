//! Command-line front end. `run` parses argv, executes one subcommand and
//! maps the outcome to an exit code: 0 on success, 1 on a pipeline error
//! (reported as a single `error: ...` line), 2 on a usage error.

mod commands;
mod provenance;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::grading::GradingError;
use crate::micro_cnn::{CnnError, LossKind};
use crate::patterns::PatternError;
use crate::slide_io::SlideError;
use crate::stain::StainError;
use crate::synth::SynthClass;
use crate::tumor_mask::TumorMaskError;

pub use provenance::{Provenance, PROVENANCE_FILE};

/// Environment variable naming the directory relative paths resolve against.
pub const DATA_DIR_ENV: &str = "WSIGRADE_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Grading(#[from] GradingError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    TumorMask(#[from] TumorMaskError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Message(String),
}

#[derive(Debug, Parser)]
#[command(name = "wsigrade", version, about = "Prostate whole-slide grading pipeline on tiled slide packages")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Base directory for relative paths.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Record the wall-clock time in provenance files.
    #[arg(long, global = true)]
    pub timestamps: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic slides with ground truth.
    Synth(SynthArgs),
    /// Compute the tumor mask of a slide and store it in the package.
    Mask(MaskArgs),
    /// Optimize the stain matrix and write the hematoxylin plane.
    Decompose(DecomposeArgs),
    /// Build the weak-label patch set from a corpus.
    Dataset(DatasetArgs),
    /// Train the micro-CNN on a patch set.
    Train(TrainArgs),
    /// Grade one slide by majority vote and draw the patch overlay.
    Grade(GradeArgs),
    /// Grade every evaluation slide of a corpus and report accuracy.
    Eval(EvalArgs),
    /// Flag nuclei with prominent nucleoli.
    Nucleoli(NucleoliArgs),
    /// Detect cribriform glands.
    Cribriform(CribriformArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassArg {
    Benign,
    #[value(name = "3+3")]
    G33,
    #[value(name = "4+4")]
    G44,
    #[value(name = "3+4")]
    G34,
    #[value(name = "4+3")]
    G43,
}

impl From<ClassArg> for SynthClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Benign => SynthClass::Benign,
            ClassArg::G33 => SynthClass::Grade3,
            ClassArg::G44 => SynthClass::Grade4,
            ClassArg::G34 => SynthClass::Mix34,
            ClassArg::G43 => SynthClass::Mix43,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    Xent,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Mse => LossKind::Mse,
            LossArg::Xent => LossKind::Xent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NetArg {
    /// 64×64 input, narrow layers.
    Desk,
    /// 256×256 input, full-width layers.
    Full,
    /// 8×8 input, two blocks.
    Tiny,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (corpus root, or slide package with --class).
    #[arg(long)]
    pub out: PathBuf,
    /// Slides per class for a corpus.
    #[arg(long, conflicts_with = "class")]
    pub per_class: Option<usize>,
    /// Generate a single slide of this class.
    #[arg(long, value_enum)]
    pub class: Option<ClassArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add a cribriform gland (single 4+4 slide only).
    #[arg(long, requires = "class")]
    pub cribriform: bool,
    /// Add a pen marker stroke (single slide only).
    #[arg(long, requires = "class")]
    pub marker: bool,
    /// Level-0 side length in pixels.
    #[arg(long, default_value_t = 1024)]
    pub size: u32,
    #[arg(long, default_value_t = 0.5)]
    pub mpp: f64,
}

#[derive(Debug, Args)]
pub struct StainArgs {
    /// Weight of the prior term.
    #[arg(long, default_value_t = crate::stain::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Pixels sampled for the fit.
    #[arg(long, default_value_t = crate::stain::DEFAULT_FIT_SAMPLES)]
    pub samples: usize,
    /// Seed of the pixel sample.
    #[arg(long = "stain-seed", default_value_t = 0)]
    pub stain_seed: u64,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    pub slide: PathBuf,
    #[arg(long, default_value_t = crate::tumor_mask::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the mask contour over the mask level.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    pub slide: PathBuf,
    #[command(flatten)]
    pub stain: StainArgs,
    /// Hematoxylin plane PNG (default: hematoxylin.png in the package).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Level of the written plane (default: the fitting level).
    #[arg(long)]
    pub level: Option<u32>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Corpus root holding dataset.json.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Patches per training slide.
    #[arg(long, default_value_t = 100)]
    pub patches: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 1)]
    pub level: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::tumor_mask::DEFAULT_K)]
    pub k: usize,
    #[command(flatten)]
    pub stain: StainArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Patch set written by `dataset`.
    #[arg(long)]
    pub data: PathBuf,
    /// Weights file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "mse")]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value = "desk")]
    pub net: NetArg,
    /// Dropout probability applied at every dropout layer of the network.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Per-iteration loss log (default: weights path with .loss.txt).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifierArgs {
    /// Trained weights.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub weights: Option<PathBuf>,
    /// Classify patches from the synthetic ground truth instead of a network.
    #[arg(long)]
    pub oracle: bool,
    /// Patch size for --oracle (a network fixes its own).
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 1)]
    pub level: u32,
}

#[derive(Debug, Args)]
pub struct GradeArgs {
    pub slide: PathBuf,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    #[arg(long, default_value_t = crate::grading::DEFAULT_EVAL_PATCHES)]
    pub patches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Patch overlay PNG drawn at the patch level.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = crate::tumor_mask::DEFAULT_K)]
    pub k: usize,
    #[command(flatten)]
    pub stain: StainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    #[arg(long, default_value_t = crate::grading::DEFAULT_EVAL_PATCHES)]
    pub patches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-slide patch overlays.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
    #[arg(long, default_value_t = crate::tumor_mask::DEFAULT_K)]
    pub k: usize,
    #[command(flatten)]
    pub stain: StainArgs,
}

#[derive(Debug, Args)]
pub struct NucleoliArgs {
    pub slide: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 50.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.05)]
    pub min_dark_weight: f64,
    #[command(flatten)]
    pub stain: StainArgs,
}

#[derive(Debug, Args)]
pub struct CribriformArgs {
    pub slide: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    pub min_roundness: f64,
    #[arg(long, default_value_t = 3)]
    pub min_lumens: usize,
    #[command(flatten)]
    pub stain: StainArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random energy cases.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Sampled network parameters.
    #[arg(long, default_value_t = 200)]
    pub params: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Shared state of one invocation.
pub struct Context {
    pub data_dir: Option<PathBuf>,
    pub timestamps: bool,
    pub argv: Vec<String>,
}

impl Context {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(d) if path.is_relative() => d.join(path),
            _ => path.to_path_buf(),
        }
    }
}

/// Arguments that shape artifacts: the global flags for threads, data
/// directory and timestamps are dropped so moving or re-threading a run
/// leaves its provenance unchanged.
fn artifact_args(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip_value = false;
    for a in args {
        if std::mem::take(&mut skip_value) {
            continue;
        }
        match a.as_str() {
            "--jobs" | "--data-dir" => skip_value = true,
            "--timestamps" => {}
            s if s.starts_with("--jobs=") || s.starts_with("--data-dir=") => {}
            _ => out.push(a),
        }
    }
    out
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Context {
        data_dir: cli.data_dir.clone(),
        timestamps: cli.timestamps,
        argv: artifact_args(argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned())),
    };
    let result = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build() {
        Ok(pool) => pool.install(|| commands::dispatch(&cli.command, &ctx)),
        Err(e) => Err(CliError::Message(e.to_string())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
