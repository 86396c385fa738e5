mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use petpipe_core::cc::Connectivity;
use petpipe_core::classifier::TracerClass;
use petpipe_core::io::ReportFormat;
use petpipe_core::mip::Plane;
use petpipe_core::postproc::{SizeUnit, SweepKind};
use petpipe_core::volume::Orientation;

#[derive(Parser, Debug)]
#[command(name = "petpipe", version, about = "PET/CT tracer classification, postprocessing and lesion metrics")]
pub struct Cli {
    /// Worker threads for batch work (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Classify the tracer, apply its postprocessing defaults to a prediction mask, optionally evaluate.
    Pipeline(PipelineArgs),
    /// Predict the tracer of a PET volume.
    Classify(ClassifyArgs),
    /// Train the coronal, sagittal and fusion classifiers.
    TrainClassifier(TrainArgs),
    /// Dice, FPV and FNV of predictions against ground truth (files or directories).
    Eval(EvalArgs),
    /// Apply SUV thresholding and/or small-component removal to a mask.
    Postproc(PostprocArgs),
    /// Metric deltas over a range of postprocessing thresholds.
    Sweep(SweepArgs),
    /// Generate a synthetic PET/CT phantom.
    Phantom(PhantomArgs),
    /// Write a maximum intensity projection as 16-bit PGM.
    Mip(MipArgs),
    /// Evaluate the weighted Dice + CE loss on random logits and check its gradient.
    LossCheck(LossCheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TracerArg {
    Fdg,
    Psma,
}

impl From<TracerArg> for TracerClass {
    fn from(t: TracerArg) -> Self {
        match t {
            TracerArg::Fdg => TracerClass::Fdg,
            TracerArg::Psma => TracerClass::Psma,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum UnitArg {
    Voxels,
    Ml,
}

impl From<UnitArg> for SizeUnit {
    fn from(u: UnitArg) -> Self {
        match u {
            UnitArg::Voxels => SizeUnit::Voxels,
            UnitArg::Ml => SizeUnit::Ml,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PlaneArg {
    Coronal,
    Sagittal,
}

impl From<PlaneArg> for Plane {
    fn from(p: PlaneArg) -> Self {
        match p {
            PlaneArg::Coronal => Plane::Coronal,
            PlaneArg::Sagittal => Plane::Sagittal,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Suv,
    Cc,
}

impl From<KindArg> for SweepKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Suv => SweepKind::Suv,
            KindArg::Cc => SweepKind::CcSize,
        }
    }
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    s.parse().map_err(|e: petpipe_core::Error| e.to_string())
}

fn parse_axes(s: &str) -> Result<Orientation, String> {
    s.parse().map_err(|e: petpipe_core::Error| e.to_string())
}

/// Options shared by commands that read volumes.
#[derive(Args, Debug, Clone)]
pub struct ReadArgs {
    /// Override the orientation stored in the file, e.g. LAS.
    #[arg(long, value_parser = parse_axes)]
    pub assume_axes: Option<Orientation>,
    /// Zero negative PET values after loading.
    #[arg(long)]
    pub clamp_nonneg: bool,
}

#[derive(Args, Debug, Clone)]
pub struct PostprocOpts {
    /// SUV threshold; defaults to the tracer's value in `pipeline`.
    #[arg(long)]
    pub suv_thresh: Option<f64>,
    /// Minimum component size, in --cc-size-unit.
    #[arg(long)]
    pub min_cc: Option<f64>,
    #[arg(long, value_enum, default_value = "voxels")]
    pub cc_size_unit: UnitArg,
    #[arg(long, value_parser = parse_connectivity, default_value = "26")]
    pub connectivity: Connectivity,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub pet: PathBuf,
    #[arg(long)]
    pub ct: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Classifier model; not needed with --tracer.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Skip classification and use this tracer.
    #[arg(long, value_enum)]
    pub tracer: Option<TracerArg>,
    #[command(flatten)]
    pub post: PostprocOpts,
    #[command(flatten)]
    pub read: ReadArgs,
    /// Output mask path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub pet: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub read: ReadArgs,
    /// Write the JSON prediction here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// CSV of `pet_path,tracer` rows; paths relative to the manifest.
    #[arg(long, conflicts_with = "phantoms", required_unless_present = "phantoms")]
    pub manifest: Option<PathBuf>,
    /// Train on a generated cohort with this many phantoms per class.
    #[arg(long)]
    pub phantoms: Option<usize>,
    /// Also report k-fold cross-validation accuracies.
    #[arg(long)]
    pub cv: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-plane epochs (default 50).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Per-plane learning rate (default 5e-4).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fusion epochs (default 20). Small training sets need more.
    #[arg(long)]
    pub fusion_epochs: Option<usize>,
    /// Fusion learning rate (default 1e-4).
    #[arg(long)]
    pub fusion_lr: Option<f64>,
    #[command(flatten)]
    pub read: ReadArgs,
    /// Model output path (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction mask, or a directory of masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth mask, or a directory with matching file names.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_parser = parse_connectivity, default_value = "26")]
    pub connectivity: Connectivity,
    #[arg(long, value_parser = parse_axes)]
    pub assume_axes: Option<Orientation>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PostprocArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Required with --suv-thresh.
    #[arg(long)]
    pub pet: Option<PathBuf>,
    #[command(flatten)]
    pub post: PostprocOpts,
    #[command(flatten)]
    pub read: ReadArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub thresholds: Vec<f64>,
    /// Prediction mask, or a directory of masks.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// PET volume or directory; required for --kind suv.
    #[arg(long)]
    pub pet: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "voxels")]
    pub cc_size_unit: UnitArg,
    #[arg(long, value_parser = parse_connectivity, default_value = "26")]
    pub connectivity: Connectivity,
    #[command(flatten)]
    pub read: ReadArgs,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long, value_enum)]
    pub tracer: TracerArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of lesions (0-8).
    #[arg(long)]
    pub lesions: Option<usize>,
    /// Full phantom spec as JSON; overrides --tracer defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MipArgs {
    #[arg(long)]
    pub pet: PathBuf,
    #[arg(long, value_enum, default_value = "coronal")]
    pub plane: PlaneArg,
    /// Native-resolution projection instead of the 224x224 normalized view.
    #[arg(long)]
    pub raw: bool,
    #[command(flatten)]
    pub read: ReadArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LossCheckArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 27)]
    pub voxels: usize,
    #[arg(long, default_value_t = petpipe_core::loss::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
    pub dice_include_background: bool,
    /// Coordinates checked by finite differences (all when larger than C*N).
    #[arg(long, default_value_t = 20)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PETPIPE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
