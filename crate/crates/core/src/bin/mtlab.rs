// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtlab::error::Error;
use mtlab::pipeline::{run_pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "mtlab",
    version,
    about = "Locate and edit translation-error components in toy transformers"
)]
struct Cli {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Rerun recorded stages and replace artifacts from another config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic parallel corpus.
    GenCorpus,
    /// Train the toy model.
    Train,
    /// Build a model with a planted mechanism.
    Plant,
    /// Attribute translation behaviour to attention heads.
    LocateHeads,
    /// Attribute translation behaviour to FFN neurons.
    LocateNeurons,
    /// Find neurons behind repetitive output.
    LocateRpn,
    /// Keep components shared across language settings.
    Intersect,
    /// Build per-setting function vectors.
    ExtractFv,
    /// Evaluate the configured edit against the unedited baseline.
    EditEval,
    /// Apply heads found on one setting to every setting.
    TransferEval,
    /// Four-way error split of the unedited model.
    Audit,
    /// Time generation with and without the edit.
    Bench,
    /// Collect results into summary tables.
    Report,
    /// Run every stage the configured strategy needs.
    Run,
    /// Print the effective configuration as JSON.
    PrintConfig,
}

fn stages(cmd: &Cmd, cfg: &RunConfig) -> Vec<Stage> {
    let one = |s| vec![s];
    match cmd {
        Cmd::GenCorpus => one(Stage::GenCorpus),
        Cmd::Train => one(Stage::Train),
        Cmd::Plant => one(Stage::Plant),
        Cmd::LocateHeads => one(Stage::LocateHeads),
        Cmd::LocateNeurons => one(Stage::LocateNeurons),
        Cmd::LocateRpn => one(Stage::LocateRpn),
        Cmd::Intersect => one(Stage::Intersect),
        Cmd::ExtractFv => one(Stage::ExtractFv),
        Cmd::EditEval => one(Stage::EditEval),
        Cmd::TransferEval => one(Stage::TransferEval),
        Cmd::Audit => one(Stage::Audit),
        Cmd::Bench => one(Stage::Bench),
        Cmd::Report => one(Stage::Report),
        Cmd::Run => Stage::default_sequence(cfg),
        Cmd::PrintConfig => vec![],
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::Json(_)
        | Error::InvalidArgument(_)
        | Error::ConfigHashMismatch { .. }
        | Error::Infeasible(_) => 2,
        Error::MissingDependency { .. } | Error::ArtifactHashMismatch(_) => 3,
        Error::NonFinite(_) | Error::Diverged { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Cmd::PrintConfig = cli.cmd {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let manifest = run_pipeline(&cfg, &stages(&cli.cmd, &cfg), &cli.out, cli.force)?;
    for (name, rec) in &manifest.stages {
        println!("{name}: {} artifact(s)", rec.outputs.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
