use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use domadapt::report::{run_experiment, Mode, Overrides, ReportError, RunConfig};
use domadapt::Precision;

#[derive(Parser)]
#[command(
    name = "domadapt",
    version,
    about = "Adversarial domain adaptation for acoustic scene classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train mapper and classifier on the labeled source device.
    Pretrain(Flags),
    /// Adapt a target mapper to the unlabeled target devices.
    Adapt(Flags),
    /// Score saved checkpoints on the test split.
    Evaluate(Flags),
    /// Run the whole pipeline on a synthetic shifted pair.
    Synth(Flags),
    /// Extract log-mel features for every clip in the manifest.
    Features(Flags),
}

#[derive(clap::Args)]
struct Flags {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed; all random streams derive from it. Overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $DOMADAPT_OUT/<mode>, else runs/<mode>].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Float width for training and checkpoints.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(ValueEnum, Clone, Copy)]
enum PrecisionArg {
    F32,
    F64,
}

impl Command {
    fn split(self) -> (Mode, Flags) {
        match self {
            Command::Pretrain(f) => (Mode::Pretrain, f),
            Command::Adapt(f) => (Mode::Adapt, f),
            Command::Evaluate(f) => (Mode::Evaluate, f),
            Command::Synth(f) => (Mode::Synth, f),
            Command::Features(f) => (Mode::Features, f),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, flags) = cli.command.split();
    let overrides = Overrides {
        mode: Some(mode),
        seed: flags.seed,
        out: flags.out,
        precision: flags.precision.map(|p| match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }),
    };
    let cfg = match flags.config {
        Some(path) => RunConfig::load(&path, &overrides),
        None => RunConfig::from_overrides(&overrides),
    };
    let result = cfg.and_then(|cfg| run_experiment(&cfg));
    match result {
        Ok(summary) => {
            print!("{}", summary.text);
            println!("config digest {}", summary.config_digest);
            println!("artifacts in {}", summary.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                ReportError::Config(_) => 2,
                e if e.is_divergence() => {
                    eprintln!("loss traces were kept in the output directory");
                    3
                }
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
