use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Exit statuses shared by every subcommand.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_TOLERANCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "wolonet", version, about = "Train, run and verify WOLONet vocoders")]
struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the log-mel spectrogram of a WAV file and store it as MEL1.
    ExtractMel {
        #[arg(long = "in", value_name = "WAV")]
        input: PathBuf,
        #[arg(long, value_name = "MEL")]
        out: PathBuf,
        /// Run config JSON; only its `mel` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Vocode a MEL1 spectrogram with a trained generator.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mel: PathBuf,
        #[arg(long, value_name = "WAV")]
        out: PathBuf,
        /// Run config JSON; defaults to config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = ["all", "tensor", "wolo", "losses", "dsp"])]
        module: String,
    },
    /// Print WOLO and residual-block multiply-add counts.
    VerifyMadds {
        #[arg(long = "C", default_value_t = 512)]
        channels: u64,
        #[arg(long = "K", default_value_t = 5)]
        kernel: u64,
        /// Tabulate C in {8, 64, 512} and K in {1, 3, 5} as well.
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value = "text", value_parser = ["text", "markdown", "csv"])]
        format: String,
    },
    /// Compare WOLO attention against the index-loop reference.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Mel cepstral distortion between two time-aligned WAV files.
    Mcd {
        #[arg(long = "ref", value_name = "WAV")]
        reference: PathBuf,
        #[arg(long = "syn", value_name = "WAV")]
        synthesized: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train briefly with each kernel activation and check kernel ranges.
    Ablate(AblateArgs),
    /// Parameter count of a generator config against the published size.
    ParamCount {
        /// Run config JSON; defaults to the full-size generator.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory of mono 16-bit WAV files.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Generate this many one-second harmonic clips instead.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config JSON; defaults to the small CPU configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Override `train.total_steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Override `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `train.batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a full-state checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, default_value = "all", value_parser = ["all", "sine", "tanh", "softmax"])]
    mode: String,
    #[arg(long, default_value_t = 200)]
    steps: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for per-mode logs and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// What a successful run concluded.
pub enum Outcome {
    Pass,
    ToleranceFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match commands::run(cli.command) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::ToleranceFailed) => ExitCode::from(EXIT_TOLERANCE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
