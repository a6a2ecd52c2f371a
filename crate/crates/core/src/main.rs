use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epictrl::pipeline::{cmd_report, resolve_output_dir, Pipeline, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "epictrl", version, about = "Estimate, observe and control a structured epidemic model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (falls back to the config, then EPICTRL_OUTPUT_DIR).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate the synthetic data set, or import the configured data file.
    Generate,
    /// Sensitivity-rank identifiability and observability test.
    Identify,
    /// Closed-form rates and prediction-error parameter fit.
    Estimate,
    /// Solve the observer LMIs and verify the gains.
    DesignObserver,
    /// Run the observer on the recorded data.
    Observe,
    /// Solve the optimal control problem from the final state estimate.
    Control,
    /// Run every stage in order.
    Pipeline,
    /// Summarize a completed run.
    Report,
}

fn stage_of(cmd: Command) -> Option<Stage> {
    match cmd {
        Command::Generate => Some(Stage::Generate),
        Command::Identify => Some(Stage::Identify),
        Command::Estimate => Some(Stage::Estimate),
        Command::DesignObserver => Some(Stage::DesignObserver),
        Command::Observe => Some(Stage::Observe),
        Command::Control => Some(Stage::Control),
        Command::Pipeline | Command::Report => None,
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let dir = resolve_output_dir(cli.output.as_deref(), &config)?;
    if let Command::Report = cli.command {
        let report = cmd_report(&dir)?;
        print!("{}", report.text);
        return Ok(());
    }
    let mut pipeline = Pipeline::new(config, &dir, cli.verbose)?;
    match stage_of(cli.command) {
        Some(stage) => pipeline.run_stage(stage),
        None => pipeline.run_all(),
    }?;
    if cli.verbose {
        eprintln!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
