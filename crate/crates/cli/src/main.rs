use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dualmark::config::PipelineConfig;
use dualmark::pipeline::{Pipeline, VerifyRequest, ARTIFACTS_ENV, DEFAULT_ARTIFACTS};

#[derive(Parser)]
#[command(name = "dualmark", version, about = "Black-box ownership watermarks for dual-encoder models")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,

    /// Replaces the owner seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact root.
    #[arg(long, global = true, env = ARTIFACTS_ENV)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    /// JSON on stdout.
    Machine,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    /// Train the owner encoder and every foreign encoder.
    TrainEncoder,
    /// Build a trigger set for every trained encoder.
    GenTriggers,
    /// Train a transform module per encoder; calibrate the owner's thresholds.
    TrainTransform,
    /// Two-phase verification of a suspect model.
    Verify {
        /// Suspect encoder checkpoint; defaults to the owner's.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Transform module checkpoint; defaults to the owner's.
        #[arg(long)]
        module: Option<PathBuf>,
        /// Trigger set directory; defaults to the owner's.
        #[arg(long)]
        triggers: Option<PathBuf>,
    },
    /// Fidelity and similarity of every noise type and strategy.
    StealthEval,
    /// Forged-trigger and substituted-model scenarios.
    AttackSim,
    /// Summarize the reports written so far.
    Report,
}

fn emit<T: Serialize>(format: Format, table: impl FnOnce() -> String, value: &T) -> Result<()> {
    match format {
        Format::Table => print!("{}", table()),
        Format::Machine => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config = config.with_owner_seed(seed).context("--seed")?;
    }
    let root = cli
        .out
        .or_else(|| config.artifacts.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ARTIFACTS));
    let p = Pipeline::new(config, root)?;
    let f = cli.format;
    match cli.command {
        Command::GenCorpus => {
            let c = p.gen_corpus()?;
            let line = format!("{} pairs in {}\n", c.len(), p.artifacts.corpus(&c.spec.name).display());
            emit(f, || line, &serde_json::json!({ "name": c.spec.name, "pairs": c.len() }))
        }
        Command::TrainEncoder => {
            let out = p.train_encoders()?;
            let table = || {
                out.iter()
                    .map(|(id, s)| {
                        let top1 = s.heldout_top1.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                        format!("{id}: held-out top-1 {top1}\n")
                    })
                    .collect()
            };
            let value: Vec<_> = out
                .iter()
                .map(|(id, s)| serde_json::json!({ "model_id": id, "heldout_top1": s.heldout_top1 }))
                .collect();
            emit(f, table, &value)
        }
        Command::GenTriggers => {
            let sets = p.gen_triggers()?;
            let table = || {
                sets.iter()
                    .map(|s| format!("{}: {} accepted, {} rejected\n", s.model_id, s.len(), s.rejected.len()))
                    .collect()
            };
            let value: Vec<_> = sets
                .iter()
                .map(|s| serde_json::json!({ "model_id": s.model_id, "accepted": s.len(), "rejected": s.rejected.len() }))
                .collect();
            emit(f, table, &value)
        }
        Command::TrainTransform => {
            let out = p.train_transforms()?;
            let table = || {
                out.iter()
                    .map(|o| {
                        let mut line = format!(
                            "{}: loss {:.4} -> {:.4}, alignment {:.3}, converged {}",
                            o.module_id, o.initial_loss, o.final_loss, o.alignment_rate, o.converged
                        );
                        if let Some(th) = o.thresholds {
                            line += &format!(", sigma {:.4}, tau {:.4}", th.sigma, th.tau);
                        }
                        line + "\n"
                    })
                    .collect()
            };
            emit(f, table, &out)
        }
        Command::Verify { model, module, triggers } => {
            let o = p.verify(&VerifyRequest { model, module, triggers })?;
            let value = serde_json::json!({
                "triggers": o.triggers.summary(),
                "basics": o.basics.summary(),
            });
            emit(f, || o.to_table(), &value)
        }
        Command::StealthEval => {
            let r = p.stealth_eval()?;
            emit(f, || r.to_table(), &r)
        }
        Command::AttackSim => {
            let a = p.attack_sim()?;
            let value = serde_json::json!({
                "scenarios": a.reports.iter().map(|r| serde_json::json!({
                    "label": r.label,
                    "success_rate": r.success_rate,
                    "set_verdict": r.set_verdict,
                })).collect::<Vec<_>>(),
                "forgery_failure_rate": a.forgery_failure_rate,
            });
            emit(f, || a.to_table(), &value)
        }
        Command::Report => {
            let s = p.report()?;
            emit(f, || s.to_table(), &s)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
