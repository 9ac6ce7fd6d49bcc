mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "tsic", version, about = "Text-guided generative image compression")]
struct Cli {
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Options every command accepts.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded, fixed-order execution (always the case here; recorded in the run config).
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, value_enum)]
    pub text_backend: Option<BackendArg>,
    /// Embedding table for the pretrained text backend.
    #[arg(long)]
    pub text_weights: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    #[value(name = "pretrained_frozen")]
    PretrainedFrozen,
    #[value(name = "deterministic_stub")]
    DeterministicStub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    #[value(name = "full")]
    Full,
    #[value(name = "no_g_text")]
    NoGText,
    #[value(name = "no_d_text")]
    NoDText,
    #[value(name = "no_text")]
    NoText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    /// Stage 1 followed by stage 2.
    #[value(name = "all")]
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    #[value(name = "perc_proxy")]
    PercProxy,
    #[value(name = "psnr")]
    Psnr,
}

/// Caption source when decoding.
#[derive(Args, Clone, Debug, Default)]
#[group(required = true, multiple = false)]
pub struct TextChoice {
    /// Caption describing the image.
    #[arg(long)]
    pub caption: Option<String>,
    /// Decode with the all-zero text embedding.
    #[arg(long)]
    pub no_text: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or both stages on a dataset manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "1")]
        stage: StageArg,
        #[arg(long, value_parser = ["0.15", "0.3", "0.45"])]
        target_bpp: Option<String>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset manifest (overrides the config's `manifest`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Image to bitstream. Text is never used here.
    Compress {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, hide = true)]
        caption: Option<String>,
        #[arg(long, hide = true)]
        no_text: bool,
    },
    /// Bitstream to image, guided by a caption or by no text.
    Decompress {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        text: TextChoice,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write mask and bit-allocation maps into this directory.
        #[arg(long)]
        emit_maps: Option<PathBuf>,
    },
    /// Rate-distortion records for every image of a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Use this caption for every image instead of each image's first caption.
        #[arg(long, conflicts_with = "no_text")]
        caption: Option<String>,
        #[arg(long)]
        no_text: bool,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// BD-rate of every text-ablated variant against the full model.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoints; variant and operating point are read from each.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "perc_proxy")]
        axis: AxisArg,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// One bitstream per image decoded with five matched and one mismatched caption.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write a synthetic image–caption dataset and its manifest.
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Mask and bit-allocation maps for one image.
    EmitMaps {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        text: TextChoice,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_default_env()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    let runs = cli.runs_dir;
    let result = match cli.command {
        Command::Train {
            common,
            stage,
            target_bpp,
            variant,
            checkpoint,
            manifest,
        } => commands::train(&runs, &common, stage, target_bpp.as_deref(), variant, checkpoint, manifest),
        Command::Compress {
            common,
            input,
            checkpoint,
            output,
            caption,
            no_text,
        } => {
            if caption.is_some() || no_text {
                Err(tsic_core::Error::Config(
                    "compress takes no text: captions are only used when decompressing".into(),
                ))
            } else {
                commands::compress(&common, &input, &checkpoint, &output)
            }
        }
        Command::Decompress {
            common,
            input,
            checkpoint,
            text,
            output,
            emit_maps,
        } => commands::decompress(&common, &input, &checkpoint, &text, &output, emit_maps.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            manifest,
            caption,
            no_text,
            limit,
        } => commands::eval(&runs, &common, &checkpoint, &manifest, caption, no_text, limit),
        Command::Ablate {
            common,
            checkpoint,
            manifest,
            axis,
            limit,
        } => commands::ablate(&runs, &common, &checkpoint, &manifest, axis, limit),
        Command::Stability {
            common,
            checkpoint,
            manifest,
            limit,
        } => commands::stability(&runs, &common, &checkpoint, &manifest, limit),
        Command::Synth { count, size, seed, out } => commands::synth(count, size, seed, &out),
        Command::EmitMaps {
            common,
            input,
            checkpoint,
            text,
            out,
        } => commands::emit_maps(&common, &input, &checkpoint, &text, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
