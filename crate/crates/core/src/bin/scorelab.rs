//! Experiment CLI: runs one configured pipeline per invocation and writes
//! a JSON report plus CSV data files. Exit codes: 0 pass, 1 assertion
//! failure, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scorelab::error::Error;
use scorelab::lab::{emit_summary, run_and_write, ExperimentConfig, PipelineKind};

#[derive(Parser)]
#[command(
    name = "scorelab",
    version,
    about = "Desk-scale diffusion laboratory: training, sampling, stability, coupling and verification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 or absent: library default). Results are
    /// identical for any value.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score model and report its final empirical loss.
    Train(RunArgs),
    /// Draw backward samples and profile memorisation.
    Sample(RunArgs),
    /// Estimate score stability and verify the generalisation bounds.
    Stability(RunArgs),
    /// Measure coupling contraction curves.
    Coupling(RunArgs),
    /// Run the verification battery (Harnack, ball bound, gap bounds).
    Verify(RunArgs),
    /// Merge report files of one experiment family into a table.
    Summarize {
        /// Report JSON files.
        reports: Vec<PathBuf>,
        /// Output directory for summary.md and summary.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_pipeline(expected: PipelineKind, args: &RunArgs) -> Result<bool, Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if config.kind != expected {
        return Err(Error::config(format!(
            "config kind '{}' does not match the '{expected}' subcommand",
            config.kind
        )));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let run = || run_and_write(&config, args.out.as_deref());
    let (dir, pass) = match args.jobs {
        Some(jobs) if jobs > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(run)?,
        _ => run()?,
    };
    println!(
        "{expected}: wrote {} ({})",
        dir.display(),
        if pass { "pass" } else { "FAIL" }
    );
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => run_pipeline(PipelineKind::Train, a),
        Command::Sample(a) => run_pipeline(PipelineKind::Sample, a),
        Command::Stability(a) => run_pipeline(PipelineKind::Stability, a),
        Command::Coupling(a) => run_pipeline(PipelineKind::Coupling, a),
        Command::Verify(a) => run_pipeline(PipelineKind::Verify, a),
        Command::Summarize { reports, out } => (|| {
            let paths: Vec<&std::path::Path> = reports.iter().map(|p| p.as_path()).collect();
            let summary = emit_summary(&paths)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("summary.md"), &summary.markdown)?;
            std::fs::write(out.join("summary.csv"), &summary.csv)?;
            println!("summarize: wrote {}", out.display());
            Ok(true)
        })(),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
