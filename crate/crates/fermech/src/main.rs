use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fermech::commands;
use fermech::{CliError, RawConfig};

#[derive(Parser)]
#[command(name = "fermech", version, about = "Facial expression recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Ensemble weights `g,m,d`; overrides `ensemble.weights`.
    #[arg(long, global = true, conflicts_with = "scheme")]
    weights: Option<String>,

    /// Named ensemble weights.
    #[arg(long, global = true, value_enum)]
    scheme: Option<Scheme>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write seeded Gaussian train/eval feature and label files.
    GenSynthetic,
    /// Train and write the checkpoint and per-epoch log.
    Train,
    /// Score the evaluation split and write score files and an F1 report.
    Eval,
    /// Merge score files into predictions.
    Merge,
    /// Correct predictions by similarity voting.
    Correct,
    /// Render the F1 table.
    Report,
}

#[derive(ValueEnum, Clone, Copy)]
enum Scheme {
    S1,
    S2,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let mut raw = RawConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        raw.set("seed", seed.to_string())?;
    }
    if let Some(w) = cli.weights {
        raw.set("ensemble.weights", w)?;
    }
    if let Some(s) = cli.scheme {
        raw.unset("ensemble.weights");
        raw.set("ensemble.scheme", if matches!(s, Scheme::S1) { "s1" } else { "s2" })?;
    }
    let cfg = raw.resolve(cli.out.as_deref())?;
    match cli.command {
        Command::GenSynthetic => commands::run_gen_synthetic(&cfg),
        Command::Train => commands::run_train(&cfg),
        Command::Eval => commands::run_eval(&cfg),
        Command::Merge => commands::run_merge(&cfg),
        Command::Correct => commands::run_correct(&cfg),
        Command::Report => commands::run_report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(msg) => {
            print!("{msg}");
            if !msg.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
