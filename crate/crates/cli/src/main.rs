use std::path::PathBuf;
use std::process::ExitCode;

use alphanet_cli::{cmd_backtest, cmd_extract, cmd_report, cmd_run, cmd_synth, cmd_train, exit_code, output_dir, Ablation, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "alphanet", version, about = "Factor mining with a Bi-LSTM/Transformer network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the synthetic-data seed and the training seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ablation variant (none, random_dropout, no_transformer, short_sequence, no_mask)
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Work directory, overriding paths.work_dir
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic panel CSV
    Synth,
    /// Fit the first cycle's feature mask
    Extract,
    /// Train every rolling cycle and write predictions
    Train,
    /// Evaluate saved predictions and write the report
    Backtest,
    /// Print a written report
    Report {
        /// Echo summary.json instead of the tables
        #[arg(long)]
        json: bool,
    },
    /// The full pipeline
    Run,
}

fn config(c: &Common) -> alphanet::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) if !p.is_file() => {
            return Err(alphanet::Error::config("--config", format!("file {} does not exist", p.display())))
        }
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    if let Some(a) = &c.ablation {
        cfg.ablation = Ablation::parse(a)?;
    }
    if let Some(o) = &c.out {
        cfg.paths.work_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> alphanet::Result<()> {
    let cfg = config(&cli.common)?;
    match &cli.command {
        Command::Synth => {
            let path = cmd_synth(&cfg)?;
            println!("{}", path.display());
        }
        Command::Extract => {
            let mask = cmd_extract(&cfg)?;
            println!("kept {} features; mask written to {}", mask.len(), output_dir(&cfg).display());
        }
        Command::Train => {
            let out = cmd_train(&cfg)?;
            let ok = out.cycles.iter().filter(|c| c.result.is_ok()).count();
            println!("{ok}/{} cycles trained; predictions in {}", out.cycles.len(), output_dir(&cfg).display());
        }
        Command::Backtest => {
            cmd_backtest(&cfg)?;
            print!("{}", cmd_report(&output_dir(&cfg), false)?);
        }
        Command::Report { json } => print!("{}", cmd_report(&output_dir(&cfg), *json)?),
        Command::Run => {
            let out = cmd_run(&cfg)?;
            print!("{}", cmd_report(&out.dir, false)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
