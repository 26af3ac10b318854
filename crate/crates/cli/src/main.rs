//! `confaug`: command-line driver for the augmentation pipeline.
//!
//! Every invocation works inside one run directory, which receives the
//! resolved config, the invocation, a JSON-lines event log, the outputs
//! and a `MANIFEST.txt` describing them.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use commands::Command;
use error::CliError;
use run::{default_run_dir, RunDir};

#[derive(Debug, Parser)]
#[command(name = "confaug", version, about = "Confidence-gated diffusion augmentation for 32x32 character images")]
#[command(after_help = "Any config field can be overridden as --section.field VALUE (e.g. --sampler.steps 50), \
                        and --seed VALUE sets the global seed.")]
struct Cli {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to $CONFAUG_RUNS_DIR/<command>-<digest>
    /// (runs/ when the variable is unset).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run_cli(std::env::args().collect()) as u8)
}

fn run_cli(argv: Vec<String>) -> i32 {
    let (rest, mut overrides) = match config::extract_overrides(argv) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    overrides.extend(cli.command.shorthand_overrides());
    let cfg = match config::resolve(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let invocation = json!({ "command": cli.command, "config": cfg });
    let dir = cli.run_dir.clone().unwrap_or_else(|| default_run_dir(cli.command.name(), &invocation));
    let mut run = match RunDir::open(&dir) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    log::info!("run directory {}", dir.display());
    let result = prepare(&run, &cli, &cfg).and_then(|()| {
        run.event("start", json!({ "command": cli.command.name() }));
        commands::execute(&cli.command, &cfg, &mut run)
    });
    let code = match result {
        Ok(out) => {
            println!("{out}");
            run.event("finish", json!({ "command": cli.command.name() }));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            run.write_error(&e);
            run.event("error", json!({ "kind": e.kind(), "message": e.to_string() }));
            e.exit_code()
        }
    };
    if let Err(e) = run.write_manifest() {
        eprintln!("error: could not write MANIFEST.txt: {e}");
        return code.max(1);
    }
    code
}

fn prepare(run: &RunDir, cli: &Cli, cfg: &config::ExperimentConfig) -> Result<(), CliError> {
    let _ = std::fs::remove_file(run.join("error.json"));
    run.write_json("config.json", cfg)?;
    let cwd = std::env::current_dir()?;
    run.write_json(
        "command.json",
        &json!({
            "command": cli.command,
            "config_file": cli.config,
            "cwd": cwd,
            "argv": std::env::args().collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}
