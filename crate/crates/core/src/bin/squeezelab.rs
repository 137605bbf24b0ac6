use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use squeezelab::metrics::EvalParams;
use squeezelab::runner;

#[derive(Parser)]
#[command(name = "squeezelab", version, about = "Tabular probability-squeezing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config.
    Run { config: PathBuf },
    /// Compare the best checkpoints of two runs.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Directory for compare.csv and compare.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a saved suite and print the report as JSON.
    Eval {
        checkpoint: PathBuf,
        suite: PathBuf,
        /// Reference policy for greedy drift (default: uniform).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 8, 32])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 1e-4)]
        prob_floor: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Lower one logit and show how the probability mass moves.
    SqueezeDemo {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = vec![2.0, 1.0, 0.0, -3.0])]
        logits: Vec<f64>,
        /// Index of the penalized token.
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, allow_hyphen_values = true, default_value_t = -1.0)]
        eta: f64,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> squeezelab::Result<()> {
    match command {
        Command::Run { config } => {
            let manifest = runner::run(&config)?;
            println!(
                "run {} ({:?}) wrote {} artifacts to {}",
                manifest.run_id,
                manifest.mode,
                manifest.artifacts.len(),
                manifest.config.output_dir.display()
            );
        }
        Command::Compare { run_a, run_b, out } => {
            let report = runner::compare(&run_a, &run_b, out.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::Eval {
            checkpoint,
            suite,
            base,
            n,
            k,
            prob_floor,
            seed,
        } => {
            let params = EvalParams { n, k, prob_floor };
            let report = runner::eval_files(&checkpoint, &suite, base.as_deref(), &params, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::SqueezeDemo { logits, m, eta, json } => {
            let demo = runner::squeeze_demo(&logits, m, eta)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&demo.to_json())?);
            } else {
                print!("{}", demo.to_table());
            }
        }
    }
    Ok(())
}
