use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nextview::conditioning::GlobalMode;
use nextview::experiment::{self, EvalMode, ExperimentConfig, Overrides, Split};
use nextview::poseplan::SequenceOrder;
use nextview::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "nextview", version, about = "Autoregressive next-view diffusion at toy scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (dataset, checkpoints, reports).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_order)]
    order: Option<SequenceOrder>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Global conditioning: lstm_ge, matmul or none.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<GlobalMode>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the train and test splits.
    GenData,
    /// Train (or resume with --checkpoint) on the train split.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate six views from one input image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Square PNG input view.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a split; writes eval.jsonl, eval.csv and eval.txt.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// model, ground_truth or ground_truth_hull.
        #[arg(long, value_parser = parse_eval_mode)]
        eval_mode: Option<EvalMode>,
    },
    /// Arms x orders x alpha comparison table.
    Ablate,
    /// Print the table for an eval or ablation output.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_order(s: &str) -> std::result::Result<SequenceOrder, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<GlobalMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_eval_mode(s: &str) -> std::result::Result<EvalMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let base = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    base.resolve(&Overrides {
        seed: c.seed,
        out: c.out.clone(),
        order: c.order,
        alpha: c.alpha,
        mode: c.mode,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { input } = &cli.command {
        print!("{}", experiment::report(input)?);
        return Ok(());
    }
    let mut cfg = load_config(&cli.common)?;
    log::info!("config hash {}", cfg.hash());
    match cli.command {
        Command::GenData => {
            let s = experiment::gen_data(&cfg)?;
            println!("wrote {} train and {} test samples to {}", s.train, s.test, s.dir.display());
        }
        Command::Train { checkpoint } => {
            let s = experiment::train(&cfg, &cfg.out.join("train"), checkpoint.as_deref())?;
            let loss = s.last_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.5}"));
            println!("trained to step {} (last loss {loss}); checkpoint {}", s.steps, s.checkpoint.display());
        }
        Command::Infer { checkpoint, input } => {
            let s = experiment::infer_to_dir(&cfg, &checkpoint, &input, &cfg.out.join("infer"))?;
            println!("wrote {} views and {}", s.views.len(), s.grid.display());
        }
        Command::Eval {
            checkpoint,
            split,
            eval_mode,
        } => {
            if let Some(m) = eval_mode {
                cfg.eval.mode = m;
            }
            let dir = cfg.out.join("eval").join(format!("{}-{}", split.as_str(), cfg.eval.mode.as_str()));
            experiment::evaluate_split(&cfg, checkpoint.as_deref(), split, &dir)?;
            print!("{}", experiment::report(&dir)?);
        }
        Command::Ablate => {
            let rows = experiment::ablate(&cfg)?;
            print!("{}", experiment::format_ablation_table(&rows));
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
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
