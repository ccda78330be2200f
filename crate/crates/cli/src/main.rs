//! `headatlas`: drives a run directory stage by stage.
//!
//! Every subcommand is one pipeline stage; each reads only artifacts earlier
//! stages wrote and stamps its own outputs with the config hash, so a
//! directory can be resumed, partially re-run, or audited after the fact.
//! Stage summaries print to stdout as JSON; diagnostics go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use headatlas_core::pipeline::{resolve_out_dir, Run, RunConfig, ENV_OUT_DIR};
use headatlas_core::Result;

#[derive(Parser)]
#[command(
    name = "headatlas",
    version,
    about = "Train a small transformer on a synthetic biography corpus, then locate, score, \
             ablate, patch, and boost the attention heads that arbitrate between copying \
             answers from context and recalling them from weights."
)]
struct Cli {
    /// Run config JSON (as printed by `init-config`); desk profile if omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory; falls back to $HEADATLAS_OUT, then ./out.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the config's run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a ready-to-edit run config to stdout.
    InitConfig {
        /// Smaller profile sized for a single-core CI budget.
        #[arg(long)]
        compact: bool,
    },
    /// Write the corpus, vocabulary, and QA evaluation files.
    GenData,
    /// Train the model; writes the checkpoint and the loss log.
    Train,
    /// Score answer quality for every evaluation mode.
    EvalQa,
    /// Attribute answers back through the network and score every head.
    LocalizeHeads,
    /// Pick the top-k head sets from the score table.
    SpecializeHeads,
    /// Knock out each head set against a size-matched random set.
    Ablate,
    /// Extract head-output vectors, sweep patch strength, evaluate patching.
    Fv,
    /// Measure needle copying with and without the retrieval-head boost.
    Niah,
    /// Fit the answer-source probe, run controls, localize copied values.
    Probe,
    /// Render the head-map SVG and the localization HTML page.
    Report,
    /// Every stage in dependency order.
    RunAll,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(RunConfig::desk_default()),
    }
}

fn emit<T: serde::Serialize>(stage: &str, summary: &T) -> Result<()> {
    eprintln!("[headatlas] {stage} done");
    println!("{}", serde_json::to_string_pretty(summary)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Command::InitConfig { compact } = cli.command {
        let cfg = if compact {
            RunConfig::compact()
        } else {
            RunConfig::desk_default()
        };
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }

    let mut cfg = load_config(cli.config.as_ref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = resolve_out_dir(cli.out.as_deref());
    eprintln!(
        "[headatlas] out dir {} (override with --out or ${ENV_OUT_DIR})",
        out.display()
    );
    let run = Run::new(cfg, &out)?;

    match cli.command {
        Command::InitConfig { .. } => unreachable!("handled above"),
        Command::GenData => emit("gen-data", &run.gen_data()?),
        Command::Train => emit("train", &run.train_model()?),
        Command::EvalQa => emit("eval-qa", &run.eval_qa()?),
        Command::LocalizeHeads => emit("localize-heads", &run.localize()?),
        Command::SpecializeHeads => emit("specialize-heads", &run.specialize()?),
        Command::Ablate => emit("ablate", &run.ablate()?),
        Command::Fv => emit("fv", &run.fv()?),
        Command::Niah => emit("niah", &run.niah()?),
        Command::Probe => emit("probe", &run.probe()?),
        Command::Report => emit("report", &run.report()?),
        Command::RunAll => emit("run-all", &run.run_all()?),
    }
}
