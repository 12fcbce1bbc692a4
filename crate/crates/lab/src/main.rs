use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mome_core::trainer::Decoding;
use mome_lab::commands::{parse_rates, AblationDim};
use mome_lab::exec::LabExecutor;
use mome_lab::{ExperimentConfig, Lab, Result};

#[derive(Parser)]
#[command(name = "mome", version, about = "Matryoshka mixture-of-experts lab")]
struct Cli {
    /// TOML experiment configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-sample work.
    #[arg(long, global = true, default_value_t = 1)]
    device_threads: usize,
    /// Forces single-threaded numeric paths.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test splits.
    Gendata,
    /// Pretrain the backbone on uncompressed sequences.
    Pretrain,
    /// Train projectors and MoME modules over the rate grid.
    Train,
    /// Score a checkpoint on the test split.
    Eval {
        /// A single rate pair `A,V` instead of the whole grid.
        #[arg(long)]
        rates: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Beam search width (1 = greedy).
        #[arg(long, default_value_t = 1)]
        beam_width: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Expert usage, routing overlap, similarity and cost reports.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One adapter run per value of one setting.
    Ablate {
        #[arg(long, value_enum)]
        dimension: AblationDim,
        /// Values; weight lists are comma-separated, one list per flag.
        #[arg(long = "value", required = true)]
        values: Vec<String>,
    },
    /// gendata, pretrain, train and eval in sequence.
    Run,
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let exec = LabExecutor::new(cli.device_threads, cli.deterministic);
    let lab = Lab::new(cfg, cli.out, exec);
    match cli.command {
        Command::Config => {
            print!("{}", lab.cfg.to_toml());
            return Ok(());
        }
        _ => lab.write_config()?,
    }
    match cli.command {
        Command::Gendata => {
            lab.gendata()?;
        }
        Command::Pretrain => {
            lab.pretrain()?;
        }
        Command::Train => {
            lab.train()?;
        }
        Command::Eval {
            rates,
            checkpoint,
            beam_width,
            temperature,
        } => {
            let rates = rates.as_deref().map(parse_rates).transpose()?;
            let decoding = if beam_width <= 1 && temperature == 1.0 {
                Decoding::Greedy
            } else {
                Decoding::Beam {
                    width: beam_width,
                    temperature,
                }
            };
            lab.eval(rates, checkpoint.as_deref(), decoding)?;
        }
        Command::Analyze { checkpoint } => {
            lab.analyze(checkpoint.as_deref())?;
        }
        Command::Ablate { dimension, values } => {
            lab.ablate(dimension, &values)?;
        }
        Command::Run => {
            lab.gendata()?;
            lab.pretrain()?;
            lab.train()?;
            lab.eval(None, None, Decoding::Greedy)?;
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
