#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::{parse_override, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Divergence(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Io(m) => ("io", m),
            CliError::Divergence(m) => ("divergence", m),
            CliError::Other(m) => ("internal", m),
        };
        write!(f, "error[{kind}]: {msg}")
    }
}

impl From<starnet::Error> for CliError {
    fn from(e: starnet::Error) -> Self {
        use starnet::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::InvalidArgument(_) | E::ConfigMismatch { .. } | E::Json(_) => CliError::Config(msg),
            E::Io { .. } | E::Format { .. } | E::Checksum { .. } => CliError::Io(msg),
            E::Divergence(_) | E::NonFinite { .. } => CliError::Divergence(msg),
            _ => CliError::Other(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "starnet", version, about = "Online phase recognition: data, training, evaluation and cost")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Precedence, lowest first: config
/// file, STARNET_SEED, `--set`, named flags.
#[derive(Args, Debug)]
struct Common {
    /// JSON run config
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set train.lr=0.01` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, Value)>,
    /// Seed for the model, training and data
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Parent directory for run outputs
    #[arg(long, value_name = "DIR")]
    runs_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, extra: &[(&str, Option<Value>)]) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned()));
        let named = [
            ("seed", self.seed.map(Value::from)),
            ("dataset", path(&self.dataset)),
            ("runs_dir", path(&self.runs_dir)),
        ];
        for (k, v) in named.into_iter().chain(extra.iter().cloned()) {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the dataset directory
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of videos
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Train the backbone with its frame-wise head (stage one)
    TrainBackbone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write backbone features of every video to the run's cache
    CacheFeatures {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Train the transformer on cached features (stage two)
    TrainTransformer {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint the cache was built from
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Feature cache directory
        #[arg(long, value_name = "DIR")]
        cache: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Online evaluation on the test split: metrics, ribbons and heatmaps
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained model checkpoint; for --no-dsr only its backbone is used
        #[arg(long, value_name = "FILE", required_unless_present = "no_msta")]
        checkpoint: Option<PathBuf>,
        /// Retrain both stages without MS-STA before evaluating
        #[arg(long)]
        no_msta: bool,
        /// Retrain the transformer with lambda = 0 before evaluating
        #[arg(long)]
        no_dsr: bool,
        /// Frames of action-feature heatmaps written for the first test video
        #[arg(long, default_value_t = 32)]
        heatmap_frames: usize,
    },
    /// Parameter, MAC and subtraction counts of the configured model
    Cost {
        #[command(flatten)]
        common: Common,
    },
    /// Prediction vs ground-truth ribbons for test videos
    Ribbon {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Only this video id; every test video when omitted
        #[arg(long)]
        video: Option<usize>,
    },
    /// Per-frame action-feature heatmaps of one video
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Video id; the first test video when omitted
        #[arg(long)]
        video: Option<usize>,
        #[arg(long, default_value_t = 32)]
        frames: usize,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let epochs = |e: Option<usize>, key: &'static str| (key, e.map(Value::from));
    match cmd {
        Command::GenData { common, videos } => {
            commands::gen_data(&common.resolve(&[("data.num_videos", videos.map(Value::from))])?)
        }
        Command::TrainBackbone { common, epochs: e } => {
            commands::train_backbone(&common.resolve(&[epochs(e, "train.backbone_epochs")])?)
        }
        Command::CacheFeatures { common, checkpoint } => commands::cache_features(&common.resolve(&[])?, &checkpoint),
        Command::TrainTransformer {
            common,
            checkpoint,
            cache,
            epochs: e,
        } => commands::train_transformer(&common.resolve(&[epochs(e, "train.transformer_epochs")])?, &checkpoint, &cache),
        Command::Eval {
            common,
            checkpoint,
            no_msta,
            no_dsr,
            heatmap_frames,
        } => commands::eval(
            &common.resolve(&[])?,
            checkpoint.as_deref(),
            commands::Variant { msta: !no_msta, dsr: !no_dsr },
            heatmap_frames,
        ),
        Command::Cost { common } => commands::cost(&common.resolve(&[])?),
        Command::Ribbon {
            common,
            checkpoint,
            video,
        } => commands::ribbon(&common.resolve(&[])?, &checkpoint, video),
        Command::Heatmap {
            common,
            checkpoint,
            video,
            frames,
        } => commands::heatmap(&common.resolve(&[])?, &checkpoint, video, frames),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
