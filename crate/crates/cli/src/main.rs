//! `wagf`: train, evaluate and inspect the lesion classifier.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;
mod heatmap;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wagf::ErrorKind;

use config::{GateArg, VariantArg};

#[derive(Parser)]
#[command(name = "wagf", version, about = "Wavelet/attention lesion classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Print class probabilities for individual images.
    Predict(PredictArgs),
    /// Export SaFA maps of one image as PGM files.
    Heatmap(HeatmapArgs),
    /// Write a synthetic dataset as PPM images and a labels CSV.
    SynthData(SynthArgs),
}

/// Flags override the matching config-file fields.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub val_images: Option<PathBuf>,
    #[arg(long)]
    pub val_labels: Option<PathBuf>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Train on generated data with this many images per class.
    #[arg(long)]
    pub synth_per_class: Option<usize>,
    #[arg(long)]
    pub augment: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds model initialization, batch order and generated data.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fusion_decay: Option<f64>,
    /// Ablation row; the `--no-*` flags are applied after it.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub no_soft_attention: bool,
    #[arg(long)]
    pub no_fusion: bool,
    #[arg(long)]
    pub no_safa: bool,
    /// Normalize backbone stage outputs.
    #[arg(long)]
    pub backbone_norm: bool,
    /// Skip normalization inside the SaFA conv stacks.
    #[arg(long)]
    pub no_safa_norm: bool,
    /// Tensor gated by the SaFA map.
    #[arg(long, value_enum)]
    pub gate_target: Option<GateArg>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// A labelled dataset given on the command line.
#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Generated data with this many images per class.
    #[arg(long, conflicts_with_all = ["images", "synth_spec"])]
    pub synth_per_class: Option<usize>,
    /// Generated data from a JSON spec.
    #[arg(long, conflicts_with = "images")]
    pub synth_spec: Option<PathBuf>,
    /// Seed for `--synth-per-class`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for metrics.json, confusion.csv and predictions.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PPM or WTEN images, resized to the model input.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the symmetry and LSTM maps.
    #[arg(long)]
    pub all_maps: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON spec; otherwise the built-in desk profiles are used.
    #[arg(long, conflicts_with_all = ["per_class", "size"])]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Message and exit code of a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<wagf::Error> for Failure {
    fn from(e: wagf::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let f64_mode = std::env::var(wagf::F64_ENV_VAR).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"));
    macro_rules! dispatch {
        ($f:ident, $a:expr) => {
            if f64_mode {
                commands::$f::<f64>($a)
            } else {
                commands::$f::<f32>($a)
            }
        };
    }
    match cli.command {
        Command::Train(a) => {
            let cfg = config::RunConfig::resolve(&a)?;
            dispatch!(train, &cfg)
        }
        Command::Eval(a) => dispatch!(eval, &a),
        Command::Predict(a) => dispatch!(predict, &a),
        Command::Heatmap(a) => dispatch!(heatmap, &a),
        Command::SynthData(a) => commands::synth_data(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
