mod commands;
mod config;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use irdistill_core::distill::Preset;

use crate::commands::{Ctx, EvalSource};
use crate::config::UsageError;
use crate::manifest::Stage;

/// Embedding-matching distillation experiments on synthetic retrieval data.
///
/// Every command reads the experiment configuration, works inside the
/// output root (IRDISTILL_OUTPUT_ROOT, else `output_dir`, else `runs`) and
/// writes one directory with a `manifest.json`.
#[derive(Debug, Parser)]
#[command(name = "irdistill", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply without one.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set teacher.hidden=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or ingest) the corpus, query split and training examples.
    GenData,
    /// Train the teacher on the training examples.
    TrainTeacher,
    /// Build the teacher's document index.
    BuildIndex,
    /// Train the query autoencoder and generate perturbed queries.
    Augment,
    /// Distill a student with a preset recipe.
    Distill {
        /// Preset name or `table1-rowN`; defaults to the config's preset.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Compute retrieval metrics for a model or a rankings file.
    Eval {
        /// Rankings TSV: query_id, doc_id, rank, score.
        #[arg(long, conflicts_with = "model")]
        rankings: Option<PathBuf>,
        /// `teacher` or `student`.
        #[arg(long)]
        model: Option<String>,
        /// Student preset (with `--model student`).
        #[arg(long)]
        preset: Option<String>,
        /// Re-rank bag-of-words candidates instead of dense retrieval.
        #[arg(long)]
        rerank: bool,
        /// Output directory name under `eval/`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate the risk inequalities for a distilled student.
    Bounds {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Collect metrics, bounds and training summaries into one table.
    Report {
        /// Source files; everything under the output root when omitted.
        inputs: Vec<PathBuf>,
    },
}

fn parse_preset(s: Option<&str>) -> Result<Option<Preset>> {
    s.map(|s| s.parse::<Preset>().map_err(|e| UsageError(e.to_string()).into()))
        .transpose()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.set)?;
    let root = config::output_root(&cfg);
    let ctx = Ctx::new(cfg, root);
    match cli.command {
        Command::GenData => commands::gen_data(&ctx)?,
        Command::TrainTeacher => commands::train_teacher_cmd(&ctx)?,
        Command::BuildIndex => commands::build_index(&ctx)?,
        Command::Augment => commands::augment(&ctx)?,
        Command::Distill { preset } => commands::distill(&ctx, parse_preset(preset.as_deref())?)?,
        Command::Eval {
            rankings,
            model,
            preset,
            rerank,
            name,
        } => {
            let preset = parse_preset(preset.as_deref())?;
            let source = match (rankings, model.as_deref()) {
                (Some(path), None) => EvalSource::Rankings(path),
                (None, Some("teacher")) => EvalSource::Teacher,
                (None, Some("student")) => EvalSource::Student(preset.unwrap_or(ctx.cfg.preset)),
                (None, Some(other)) => {
                    return Err(UsageError(format!("unknown model {other:?}; expected teacher or student")).into())
                }
                _ => return Err(UsageError("eval needs --rankings FILE or --model MODEL".into()).into()),
            };
            commands::eval(&ctx, &source, rerank, name.as_deref())?
        }
        Command::Bounds { preset } => commands::bounds(&ctx, parse_preset(preset.as_deref())?)?,
        Command::Report { inputs } => {
            let (report, files) = report::build(&ctx.root, &inputs)?;
            let mut stage = Stage::new(&ctx.root, "report", "report", &config::config_hash(&ctx.cfg), ctx.cfg.seed);
            for f in &files {
                stage.read_input(f)?;
            }
            stage.write("report.csv", &report::to_csv(&report)?)?;
            let mut json = serde_json::to_vec_pretty(&report)?;
            json.push(b'\n');
            stage.write("report.json", &json)?;
            println!("report: {} rows", report.rows.len());
            stage.finish()?
        }
    };
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
