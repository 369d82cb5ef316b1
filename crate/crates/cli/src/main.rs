use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crossmap::harness::pipeline::{evaluate, run_pipeline, Metric, Task};
use crossmap::harness::synth::{generate_synthetic, write_synthetic, SyntheticSpec};
use crossmap::Result;

#[derive(Parser)]
#[command(
    name = "crossmap",
    version,
    about = "Cross-modal functional maps and multi-modal classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal dataset and its manifest.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit functional maps and write pointwise correspondences.
    Correspond {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-modal retrieval of the top `k` targets per query in both directions.
    Retrieve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multi-modal classifier and predict the test sets.
    Classify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions: rankings against judgments (map) or labels against labels (acc).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Map,
    Acc,
}

fn run(command: Command) -> Result<String> {
    let pipeline = |manifest: PathBuf, task: Task, out: PathBuf| {
        run_pipeline(&manifest, task, &out).map(|r| r.to_text())
    };
    match command {
        Command::Synth { spec, out } => {
            let spec = SyntheticSpec::load(&spec)?;
            let data = generate_synthetic(&spec)?;
            let manifest = write_synthetic(&spec, &data, &out)?;
            Ok(format!("manifest = {}\n", manifest.display()))
        }
        Command::Correspond { manifest, out } => pipeline(manifest, Task::Correspond, out),
        Command::Retrieve { manifest, k, out } => pipeline(manifest, Task::Retrieve { k }, out),
        Command::Classify { manifest, out } => pipeline(manifest, Task::Classify, out),
        Command::Eval {
            pred,
            truth,
            metric,
        } => {
            let metric = match metric {
                MetricArg::Map => Metric::Map,
                MetricArg::Acc => Metric::Accuracy,
            };
            evaluate(&pred, &truth, metric).map(|v| format!("{v}\n"))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
