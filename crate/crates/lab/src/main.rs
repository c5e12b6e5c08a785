use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rwre_lab::experiments::validate;
use rwre_lab::plot::emit_plot_data;
use rwre_lab::{load, run, LabError};

#[derive(Parser)]
#[command(name = "rwre-lab", version, about = "Random walk in random environment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config, with optional key=value overrides.
    Run {
        config: PathBuf,
        overrides: Vec<String>,
    },
    /// Check a config without running it.
    Validate {
        config: PathBuf,
        overrides: Vec<String>,
    },
    /// Extract tidy plotting CSVs from a results.json.
    PlotData {
        results: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, overrides } => load(&config, &overrides).and_then(|c| run(&c)).map(|s| {
            println!("{} -> {}", s.manifest.config_hash, s.output_dir.display());
            for f in &s.files {
                println!("  {f}");
            }
        }),
        Command::Validate { config, overrides } => load(&config, &overrides).and_then(|c| {
            validate(&c.config)?;
            println!("ok {} ({})", c.hash, c.config.experiment.name());
            Ok(())
        }),
        Command::PlotData { results, kind, out } => {
            emit_plot_data(&results, &kind, out.as_deref()).map(|p| println!("{}", p.display()))
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() || matches!(e, LabError::UnknownKind(_)) { 2 } else { 1 })
        }
    }
}
