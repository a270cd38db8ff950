use std::io::IsTerminal;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use thematica::pipeline::{self, BackendChoice, PipelineConfig, Runner, Stage};

#[derive(Parser)]
#[command(
    name = "thematica",
    version,
    about = "Staged thematic analysis and persona generation"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "thematica.toml")]
    config: PathBuf,
    /// Run directory for artifacts and the manifest.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Use the offline mock backend instead of the HTTP endpoint.
    #[arg(long, global = true)]
    mock: bool,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    /// Override the persona selection seed.
    #[arg(long, global = true)]
    persona_seed: Option<u64>,
    /// Override the mock backend seed.
    #[arg(long, global = true)]
    mock_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and chunk the transcripts.
    Ingest,
    /// Code every chunk for every kind.
    Code,
    /// Merge near-duplicate codes into codebooks.
    Reduce,
    /// Group codebook entries into themes.
    Themes,
    /// Sample themes and write personas.
    Personas,
    /// Run every stage in order.
    RunAll,
    /// Summarize the run manifest.
    Report,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "thematica=info".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();

    if let Command::Report = cli.command {
        let manifest = pipeline::load_manifest(&cli.run_dir)?;
        match manifest {
            Some(m) => print!("{}", pipeline::report(&m)),
            None => println!("no stages run"),
        }
        return Ok(());
    }

    let mut config = PipelineConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if cli.persona_seed.is_some() {
        config.seeds.personas = cli.persona_seed;
    }
    if cli.mock_seed.is_some() {
        config.seeds.mock = cli.mock_seed;
    }
    let backend = if cli.mock {
        BackendChoice::Mock
    } else {
        BackendChoice::Http
    };
    let mut runner = Runner::open(config, &cli.run_dir, backend, cli.force)?;

    let stages: Vec<Stage> = match cli.command {
        Command::Ingest => vec![Stage::Ingest],
        Command::Code => vec![Stage::Code],
        Command::Reduce => vec![Stage::Reduce],
        Command::Themes => vec![Stage::Themes],
        Command::Personas => vec![Stage::Personas],
        Command::RunAll => Stage::ALL.to_vec(),
        Command::Report => unreachable!("handled above"),
    };
    let mut failed = false;
    for stage in stages {
        match runner.run_stage(stage) {
            Ok(record) => eprintln!("{stage}: {:?} ({} ms)", record.status, record.duration_ms),
            Err(e) => {
                eprintln!("{stage}: {e}");
                failed = true;
                break;
            }
        }
    }
    print!("{}", pipeline::report(runner.manifest()));
    if failed {
        bail!("pipeline stopped");
    }
    Ok(())
}
