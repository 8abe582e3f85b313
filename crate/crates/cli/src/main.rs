//! `mcfloat` command-line harness: error profiles, training experiments,
//! hyperbolic embeddings and operator timings.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use mcfloat::experiments::{self, Command, RunConfig};
use mcfloat::linalg::ReductionPlan;
use mcfloat::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Cmd {
    ErrProfile,
    Linreg,
    Logreg,
    Mlp,
    Embed,
    Bench,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::ErrProfile => Command::ErrProfile,
            Cmd::Linreg => Command::Linreg,
            Cmd::Logreg => Command::Logreg,
            Cmd::Mlp => Command::Mlp,
            Cmd::Embed => Command::Embed,
            Cmd::Bench => Command::Bench,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: mcfloat::Error| e.to_string())
}

/// Multi-component floating-point experiments.
#[derive(Debug, Parser)]
#[command(name = "mcfloat", version)]
struct Args {
    /// Experiment to run.
    #[arg(value_enum)]
    command: Cmd,
    /// Working precision: b16, b32 or b64.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Component counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    nc: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size (full batch when omitted, except for embed).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Record the loss every N epochs.
    #[arg(long)]
    log_every: Option<usize>,
    /// CSV table (label in the last column) or TSV edge list.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for report.json and CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Combine reduction terms in a balanced tree instead of left to right.
    #[arg(long)]
    pairwise_reduction: bool,
    /// Two-product kernel: fused multiply-add or Dekker splitting.
    #[arg(long, value_enum)]
    fma: Option<Switch>,
    /// Keep optimizer buffers as 2-component tensors.
    #[arg(long)]
    mc_state: bool,
    /// Worker threads for matrix reductions.
    #[arg(long)]
    threads: Option<usize>,
    /// Synthetic rows, or samples per error-profile cell.
    #[arg(long)]
    samples: Option<usize>,
    /// MLP hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Negative samples per positive pair.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Print the JSON report instead of the summary.
    #[arg(long)]
    json: bool,
}

fn config(args: Args) -> RunConfig {
    let mut c = RunConfig::new(args.command.into(), args.data);
    let plan = if args.pairwise_reduction { ReductionPlan::pairwise() } else { ReductionPlan::sequential() };
    c.plan = plan.with_threads(args.threads.unwrap_or(1));
    c.mc_state = args.mc_state;
    if let Some(v) = args.precision {
        c.precision = v;
    }
    if let Some(v) = args.nc {
        c.nc = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.lr {
        c.lr = v;
    }
    if let Some(v) = args.momentum {
        c.momentum = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if args.batch_size.is_some() {
        c.batch_size = args.batch_size;
    }
    if let Some(v) = args.log_every {
        c.log_every = v;
    }
    c.out = args.out;
    if let Some(v) = args.fma {
        c.fma = v == Switch::On;
    }
    if let Some(v) = args.samples {
        c.samples = v;
    }
    if let Some(v) = args.hidden {
        c.hidden = v;
    }
    if let Some(v) = args.dim {
        c.dim = v;
    }
    if let Some(v) = args.negatives {
        c.negatives = v;
    }
    if let Some(v) = args.warmup {
        c.warmup = v;
    }
    if let Some(v) = args.repeats {
        c.repeats = v;
    }
    c
}

fn run(args: Args) -> Result<()> {
    let json = args.json;
    let cfg = config(args);
    let report = experiments::run(&cfg).with_context(|| format!("{} failed", cfg.command))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.summary());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mcfloat: error: {e:#}");
            ExitCode::from(2)
        }
    }
}
