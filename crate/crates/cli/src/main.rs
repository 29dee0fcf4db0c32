//! `mtclar`: data preparation, training, evaluation, few-shot labelling and
//! the annotation service.
//!
//! Exit codes: 0 success, 2 invalid data, configuration or flags, 3 unusable
//! checkpoint, 4 runtime failure (training divergence, output I/O, network).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mtclar", version, about = "Contrastive affect model: training, evaluation and few-shot video labelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter an image manifest by the affect wheel and write the retained index with per-class counts.
    Prepare(PrepareArgs),
    /// Train the pairwise model on an image manifest.
    Train(TrainArgs),
    /// Train singleton heads on top of a frozen pairwise checkpoint.
    TrainSl(TrainSlArgs),
    /// Cross-validated fine-tuning of the differential heads on a video manifest.
    Finetune(FinetuneArgs),
    /// Compute a metric report from predictions or a checkpoint's singleton heads.
    Eval(EvalArgs),
    /// Label every video of a manifest from an anchor set.
    FslLabel(FslArgs),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Profile {
    /// Full-size settings.
    Paper,
    /// Small encoder and short schedule for a CPU.
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AnchorChoice {
    First,
    Random,
    Subject,
    OtherSubject,
    Recurring,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AggregationChoice {
    Preceding,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FoldChoice {
    Independent,
    Dependent,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskChoice {
    /// Similarity plus both differentials.
    Multi,
    Similarity,
    Deltas,
}

#[derive(Args, Clone, Debug)]
pub struct SeedArgs {
    /// Seed for pair sampling, augmentation, shuffling, folds and random anchors.
    #[arg(long, default_value_t = 0)]
    pub seed_data: u64,
    /// Seed for the random loss weights.
    #[arg(long, default_value_t = 1)]
    pub seed_shake: u64,
    /// Seed for parameter initialisation.
    #[arg(long, default_value_t = 2)]
    pub seed_init: u64,
}

#[derive(Args, Clone, Debug)]
pub struct TrainingArgs {
    /// Preset training settings.
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
    /// Full training configuration as JSON; replaces the profile.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub seeds: SeedArgs,
}

#[derive(Args, Clone, Debug)]
pub struct AnchorArgs {
    /// How anchors are chosen per video.
    #[arg(long, value_enum, default_value = "first")]
    pub anchor_config: AnchorChoice,
    /// Spacing of recurring anchors (recurring only).
    #[arg(long)]
    pub n: Option<usize>,
    /// How several anchors combine into one label.
    #[arg(long, value_enum, default_value = "preceding")]
    pub aggregation: AggregationChoice,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Image manifest (CSV: image_path,category_code,valence,arousal,subject_id).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Wheel centers and radius as JSON; the built-in wheel when omitted.
    #[arg(long)]
    pub wheel_config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Image manifest (CSV).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Wheel centers and radius as JSON; the built-in wheel when omitted.
    #[arg(long)]
    pub wheel_config: Option<PathBuf>,
    /// Output directory for checkpoints and loss curves.
    #[arg(long)]
    pub out: PathBuf,
    /// Which heads to train.
    #[arg(long, value_enum, default_value = "multi")]
    pub tasks: TaskChoice,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct TrainSlArgs {
    /// Image manifest (CSV); rows need a category and valence/arousal.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Wheel centers and radius as JSON; the built-in wheel when omitted.
    #[arg(long)]
    pub wheel_config: Option<PathBuf>,
    /// Pairwise checkpoint whose encoder is frozen.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Video manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pairwise checkpoint to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Fold construction.
    #[arg(long, value_enum, default_value = "independent")]
    pub folds: FoldChoice,
    /// Number of folds.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[command(flatten)]
    pub anchors: AnchorArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Manifest holding the ground truth (CSV image set or JSON video set).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predictions CSV with header video_id,index,valence,arousal. For image
    /// sets video_id is empty and index is the 0-based data row.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Baseline predictions in the same format; adds KS tests on absolute errors.
    #[arg(long, requires = "predictions")]
    pub baseline: Option<PathBuf>,
    /// Checkpoint with singleton heads, evaluated on an image manifest.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; the report goes to report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FslArgs {
    /// Video manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint predicting the differentials.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Use the dataset labels as the differential model (for checking the pipeline).
    #[arg(long)]
    pub oracle: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub anchors: AnchorArgs,
    /// Seed for random anchor choices.
    #[arg(long, default_value_t = 0)]
    pub seed_data: u64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Video manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint used for propagation; without one (and without --oracle) propagation answers 503.
    #[arg(long, conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Use the dataset labels as the differential model.
    #[arg(long)]
    pub oracle: bool,
    /// Port to listen on; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory for the session journals; sessions live in memory only when omitted.
    #[arg(long)]
    pub journal: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::TrainSl(a) => commands::train_sl(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::FslLabel(a) => commands::fsl_label(&a),
        Command::Serve(a) => commands::serve(&a),
    };
    match result {
        Ok(artifacts) => {
            for p in artifacts {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
