use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "velum", version, about = "kNN-LM privacy laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic public/private corpora with planted identifiers.
    Synth(commands::SynthArgs),
    /// Train or fine-tune an encoder checkpoint on a corpus.
    Train(commands::TrainArgs),
    /// Apply a sanitization strategy to a corpus.
    Sanitize(commands::SanitizeArgs),
    /// Build a datastore by running an encoder over a corpus.
    BuildDs(commands::BuildDsArgs),
    /// Grid-search (k, lambda) on a validation corpus.
    Sweep(commands::SweepArgs),
    /// Serve a model bundle over HTTP.
    Serve(commands::ServeArgs),
    /// Run an extraction attack against a deployed service.
    Attack(commands::AttackArgs),
    /// Run scenarios end to end from a plan file.
    Scenario(commands::ScenarioArgs),
    /// Re-render scenario reports as json/csv/markdown.
    Report(commands::ReportArgs),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Sanitize(args) => commands::sanitize(args),
        Command::BuildDs(args) => commands::build_ds(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::Serve(args) => commands::serve(args),
        Command::Attack(args) => commands::attack(args),
        Command::Scenario(args) => commands::scenario(args),
        Command::Report(args) => commands::report(args),
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
