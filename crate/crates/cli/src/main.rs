use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mainforge_cli::commands::{CliError, Session, cmd_align, cmd_augment, cmd_curate, cmd_report, cmd_run};
use mainforge_cli::config::{Overrides, load};
use mainforge_cli::fixture::write_desk;

/// Instruction-data synthesis by mutual alignment of forward and reverse models.
#[derive(Parser)]
#[command(name = "mainforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Relative paths inside resolve against its directory.
    #[arg(long, short)]
    config: PathBuf,
    /// Global RNG seed; overrides `global_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.output`.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Override any config leaf, e.g. `--set alignment.iterations=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Mutually align the forward and reverse models on the seed data.
    Align(Common),
    /// Back-translate the unlabeled responses with the aligned reverse model.
    Augment(Common),
    /// Score candidates with the aligned forward model and write the manifest.
    Curate(Common),
    /// align, augment and curate in sequence.
    Run(Common),
    /// Iteration-count and weighting sweeps on the held-out pairs.
    Report(Common),
    /// Write the desk-scale fixture and its config.
    Fixture {
        #[arg(long, short)]
        output: PathBuf,
    },
}

fn session(c: Common) -> Result<Session, CliError> {
    let loaded = load(&c.config, &Overrides { set: c.set, seed: c.seed, output: c.output })?;
    Ok(Session::open(loaded)?)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Align(c) => {
            let outcome = cmd_align(&session(c)?)?;
            let alphas: Vec<String> = outcome.history.iter().filter_map(|r| r.alpha).map(|a| format!("{a:.3}")).collect();
            println!("aligned: {} steps, alphas [{}]", outcome.history.len(), alphas.join(", "));
        }
        Command::Augment(c) => {
            let s = cmd_augment(&session(c)?)?;
            println!("augmented: {} of {} responses kept, {} dropped", s.kept, s.input, s.dropped.total());
        }
        Command::Curate(c) => {
            let s = cmd_curate(&session(c)?)?;
            println!("curated: {} selected + {} seed ({} candidates, {} failed)", s.selected, s.seed, s.seen, s.failed);
        }
        Command::Run(c) => {
            let s = cmd_run(&session(c)?)?;
            println!("curated: {} selected + {} seed ({} candidates, {} failed)", s.selected, s.seed, s.seen, s.failed);
        }
        Command::Report(c) => {
            let path = cmd_report(&session(c)?)?;
            println!("report: {}", path.display());
        }
        Command::Fixture { output } => {
            write_desk(&output).map_err(|e| CliError::Stage(anyhow::anyhow!("writing fixture: {e}")))?;
            println!("fixture: {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
