use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tod_cli::commands::{self, CaseSelection};
use tod_cli::{CliError, Config};
use tod_core::{LossVariant, SegmenterKind};

#[derive(Parser)]
#[command(name = "tod", version, about = "Task-oriented low-dose CT denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic NDCT/LDCT dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Regenerate an existing dataset.
        #[arg(long)]
        force: bool,
        /// Override the data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain segmenters on clean NDCT.
    PretrainSeg {
        #[arg(long)]
        config: PathBuf,
        /// Segmenter kind or `all`.
        #[arg(long, default_value = "all")]
        kind: String,
    },
    /// Train one denoiser variant.
    TrainDenoiser {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: LossVariant,
        /// Frozen segmenter checkpoint; required for tod.
        #[arg(long)]
        segmenter: Option<PathBuf>,
    },
    /// Evaluate image quality and downstream Dice on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Gradient maps of each loss with respect to the denoiser output.
    Gradmaps {
        #[arg(long)]
        config: PathBuf,
        /// Denoiser checkpoint; defaults to the half-trained tod one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test case id or `all`.
        #[arg(long, default_value = "all")]
        case: String,
    },
    /// Run the whole pipeline and check the expected directions.
    Reproduce {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn load(path: &Path) -> Result<Config, CliError> {
    let c = Config::from_file(path)?;
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    tod_core::runtime::init_runtime(tod_cli::threads_from_env()?)?;
    match cli.command {
        Command::GenData { config, force, seed } => {
            let mut c = load(&config)?;
            if let Some(s) = seed {
                c.data.seed = s;
            }
            commands::gen_data(&c, force)?;
        }
        Command::PretrainSeg { config, kind } => {
            let c = load(&config)?;
            let kinds = if kind == "all" {
                SegmenterKind::ALL.to_vec()
            } else {
                vec![kind.parse::<SegmenterKind>()?]
            };
            commands::pretrain_seg(&c, &kinds)?;
        }
        Command::TrainDenoiser { config, variant, segmenter } => {
            let c = load(&config)?;
            commands::train_denoiser_cmd(&c, variant, segmenter.as_deref())?;
        }
        Command::Evaluate { config } => {
            commands::evaluate(&load(&config)?)?;
        }
        Command::Gradmaps { config, checkpoint, case } => {
            let c = load(&config)?;
            let sel = if case == "all" { CaseSelection::All } else { CaseSelection::Id(case) };
            commands::gradmaps(&c, checkpoint.as_deref(), &sel)?;
        }
        Command::Reproduce { config, force } => {
            let report = commands::reproduce(&load(&config)?, force)?;
            for c in &report.checks {
                println!("criterion {} {}: {} ({})", c.criterion, c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
            }
            let failures = report.failures();
            if !failures.is_empty() {
                return Err(CliError::Acceptance(failures));
            }
        }
        Command::DefaultConfig => print!("{}", tod_cli::config::default_config_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
