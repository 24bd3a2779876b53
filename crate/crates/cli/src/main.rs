use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod failure;

use failure::Failure;

#[derive(Parser)]
#[command(name = "ilr", version, about = "Train, evaluate and verify recurrent decoder-only transformers")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a run config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Replace train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Perplexity of a checkpoint on the test split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        /// Strategy to evaluate with instead of the stored one:
        /// `baseline`, `ilr:2,1,1,1`, `block:3` or a JSON object.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
    },
    /// Analytical FLOPs of a config's strategy and the reference ratios.
    Flops {
        #[arg(short, long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train and evaluate every strategy × positional mode × seed of the
    /// config's sweep section.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the gradient and equivalence oracle suite.
    Verify {
        #[arg(long, default_value = "tiny")]
        scale: ilr_core::verify::Scale,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Decode every intermediate state of a checkpoint on some text.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Print a preset run config.
    Preset {
        /// One of paper-small, paper-large, desk-small, tiny.
        name: String,
        /// Corpus files to put in data.paths.
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("ILR_THREADS") {
        std::env::set_var("MATMUL_NUM_THREADS", n);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let v = cli.verbose;
    let result = match cli.command {
        Command::Train { config, seed } => commands::train(&config, seed, v),
        Command::Eval {
            checkpoint,
            corpus,
            strategy,
            test_fraction,
        } => commands::eval(&checkpoint, &corpus, strategy.as_deref(), test_fraction),
        Command::Flops { config, preset } => commands::flops(config.as_deref(), preset.as_deref()),
        Command::Sweep { config, jobs, seed } => commands::sweep(&config, jobs, seed, v),
        Command::Verify { scale, json } => commands::verify(scale, json.as_deref()),
        Command::Probe {
            checkpoint,
            text,
            file,
            top_k,
        } => commands::probe(&checkpoint, text.as_deref(), file.as_deref(), top_k),
        Command::Preset {
            name,
            corpus,
            output_dir,
        } => commands::preset(&name, corpus, output_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
