use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fire_cli::config::RunConfig;
use fire_cli::error::RunError;
use fire_cli::pipeline::{run, Action, RunOptions, Stage};
use fire_core::llm::BackendKind;

#[derive(Debug, Parser)]
#[command(name = "fire", version, about = "Run the explanation pipeline as resumable stages")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single stage; without it every out-of-date stage runs in order.
    #[arg(long, value_enum)]
    stage: Option<Stage>,
    /// Re-run up-to-date stages and ignore stale upstream stages.
    #[arg(long)]
    force: bool,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override gateway.backend.
    #[arg(long, value_parser = ["remote", "mock"])]
    backend: Option<String>,
}

fn execute(cli: Cli) -> Result<(), RunError> {
    let mut config = RunConfig::load(&cli.config)?;
    config.apply_env();
    let backend = cli
        .backend
        .as_deref()
        .map(|b| b.parse::<BackendKind>().map_err(|e| RunError::Config(vec![e])))
        .transpose()?;
    config.apply_overrides(cli.seed, backend);
    let outcome = run(
        &config,
        RunOptions {
            stage: cli.stage,
            force: cli.force,
        },
    )?;
    for (stage, action) in &outcome.stages {
        match action {
            Action::Ran => println!("{stage}: done"),
            Action::UpToDate => println!("{stage}: up to date"),
        }
    }
    let g = outcome.gateway;
    println!(
        "gateway: {} backend calls, {} cache hits, {} re-prompts",
        g.backend_calls, g.cache_hits, g.reprompts
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
