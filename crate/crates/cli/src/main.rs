//! `lreid`: run, compare, diagnose and evaluate lifelong re-ID experiments.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lreid_core::{EvalEmbedding, Layout, Method};

/// Output-root override applied to relative `out_dir` values.
pub const OUT_ROOT_ENV: &str = "LREID_OUT_ROOT";

#[derive(Parser)]
#[command(name = "lreid", version, about = "Lifelong person re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over a domain stream, evaluating after every step.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` and the output-root variable.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Comma-separated domain order, e.g. `2,0,1`.
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
        /// Continue after the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Method x domain table and forgetting curves over finished runs.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
    },
    /// Cosine-similarity heatmaps from a run's diagnostic dumps.
    Diagnose {
        run: PathBuf,
        /// Defaults to `<run>/heatmaps`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        layout: LayoutArg,
        #[arg(long, value_enum, default_value = "backbone")]
        embedding: EmbeddingArg,
        /// Rows per graph when evaluating enhanced embeddings.
        #[arg(long, default_value_t = 32)]
        chunk: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LayoutArg {
    Csv,
    Tree,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Csv => Layout::Csv,
            LayoutArg::Tree => Layout::Tree,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EmbeddingArg {
    Backbone,
    Enhanced,
}

impl From<EmbeddingArg> for EvalEmbedding {
    fn from(e: EmbeddingArg) -> Self {
        match e {
            EmbeddingArg::Backbone => EvalEmbedding::Backbone,
            EmbeddingArg::Enhanced => EvalEmbedding::Enhanced,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: lreid_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            method,
            order,
            resume,
        } => commands::run(commands::RunArgs {
            config,
            out,
            seed,
            method,
            order,
            resume,
        }),
        Command::Compare { runs, out } => commands::compare(&runs, &out),
        Command::Diagnose { run, out } => {
            let out = out.unwrap_or_else(|| run.join("heatmaps"));
            commands::diagnose(&run, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            layout,
            embedding,
            chunk,
        } => commands::eval(&checkpoint, &data, layout.into(), embedding.into(), chunk),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
