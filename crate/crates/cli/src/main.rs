//! `hybrid`: teacher pretraining, hybrid conversion, distillation, SFT,
//! GRPO, evaluation and decode benchmarks from one binary.

mod commands;
mod config;
mod run;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use commands::{Command, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "hybrid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn kind(e: &anyhow::Error) -> &'static str {
    if e.downcast_ref::<ConfigError>().is_some() {
        return "config";
    }
    match e.downcast_ref::<hybrid_core::Error>() {
        Some(hybrid_core::Error::Shape { .. }) => "shape",
        Some(hybrid_core::Error::NonFinite(_)) => "non_finite",
        Some(hybrid_core::Error::Capacity { .. }) => "capacity",
        Some(hybrid_core::Error::Invalid(_)) => "invalid",
        Some(hybrid_core::Error::Checkpoint(_)) => "checkpoint",
        Some(hybrid_core::Error::Diverged { .. }) => "diverged",
        Some(hybrid_core::Error::Io(_)) => "io",
        Some(hybrid_core::Error::Json(_)) => "json",
        None => "error",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run_dir = cli.command.run_dir().map(|p| p.to_path_buf());
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = kind(&e);
            let record = json!({
                "error": kind,
                "message": format!("{e:#}"),
                "chain": e.chain().map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{record}");
            if let Some(dir) = run_dir.filter(|d| d.is_dir()) {
                let _ = std::fs::write(dir.join("error.json"), format!("{record}\n"));
            }
            ExitCode::from(if kind == "config" { 2 } else { 1 })
        }
    }
}
