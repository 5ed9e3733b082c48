//! `dacs`: generate toy data, train, decode and analyse streaming
//! monotonic-attention models.

mod commands;
mod config;
mod error;
mod manifest;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dacs_core::parallel::Parallelism;
use dacs_core::Lookahead;

use commands::{Context, DecodeArgs, EvalArgs, MechanismOverride};
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "dacs", version, about = "Streaming monotonic attention experiments")]
struct Cli {
    /// Experiment config (TOML); defaults to the noiseless preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed (model initialization and batch order).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory; defaults to the config `out` or `runs/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct MechanismFlags {
    /// Cross-attention mechanism.
    #[arg(long, value_parser = ["dacs", "hma", "mocha", "smocha", "mta", "offline"])]
    mechanism: Option<String>,
    /// DACS maximum look-ahead, a positive integer or `inf`.
    #[arg(long, value_name = "N|inf")]
    max_lookahead: Option<Lookahead>,
    /// MoChA / sMoChA chunk window.
    #[arg(long, value_name = "N")]
    chunk_window: Option<usize>,
}

impl MechanismFlags {
    fn to_override(&self) -> MechanismOverride {
        MechanismOverride { name: self.mechanism.clone(), max_lookahead: self.max_lookahead, chunk_window: self.chunk_window }
    }
}

#[derive(Args, Debug)]
struct EvalFlags {
    /// Dataset directory written by `gen`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
    split: String,
    /// Beam width; 1 decodes greedily.
    #[arg(long, value_name = "N")]
    beam: Option<usize>,
    /// Decode only the first N utterances.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

impl EvalFlags {
    fn args(&self) -> EvalArgs<'_> {
        EvalArgs { data: &self.data, split: &self.split, beam: self.beam, limit: self.limit }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/dev/test splits of the synthetic alignment task.
    Gen,
    /// Train a model and write its checkpoint and loss curve.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[command(flatten)]
        mechanism: MechanismFlags,
    },
    /// Decode a split, writing transcripts, step logs, traces and attention dumps.
    Decode {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        mechanism: MechanismFlags,
        /// Utterances whose attention weights are dumped.
        #[arg(long, default_value_t = 1, value_name = "N")]
        dump: usize,
    },
    /// Error rate, cost ratio and latency of a DACS model across look-aheads.
    #[command(name = "sweep-m")]
    SweepM {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalFlags,
        /// Comma-separated look-aheads, e.g. `inf,16,8,4`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        lookaheads: Option<Vec<Lookahead>>,
    },
    /// Error rate and cost ratio across mechanisms.
    Compare {
        /// One checkpoint (mechanisms from the config) or several.
        #[arg(long = "checkpoint", value_name = "PATH", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Finite-difference check of every differentiable path.
    Gradcheck {
        /// Parameters probed per full-model case.
        #[arg(long, value_name = "N")]
        probes: Option<usize>,
    },
    /// Render attention dumps as PNG heatmaps.
    Render {
        /// Dump directories, or directories holding several dumps.
        #[arg(required = true, value_name = "DUMP")]
        dumps: Vec<PathBuf>,
        /// Pixels per cell.
        #[arg(long, default_value_t = 8)]
        cell: u32,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train { .. } => "train",
            Command::Decode { .. } => "decode",
            Command::SweepM { .. } => "sweep-m",
            Command::Compare { .. } => "compare",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Render { .. } => "render",
        }
    }
}

fn configure_threads(threads: Option<usize>) -> CliResult<Parallelism> {
    match threads {
        None => Ok(Parallelism::Rayon),
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => {
            #[cfg(feature = "parallel")]
            if n > 1 {
                // a pool may already exist in-process; its size is then kept
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            Ok(Parallelism::from_threads(n))
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = config::load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    let command = cli.command.name();
    let out = cli
        .out
        .or_else(|| config.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(command));
    let par = configure_threads(cli.threads)?;
    let ctx = Context { config, out, par };
    match &cli.command {
        Command::Gen => commands::gen(&ctx),
        Command::Train { data, mechanism } => commands::train(&ctx, data, &mechanism.to_override()),
        Command::Decode { checkpoint, eval, mechanism, dump } => commands::decode(
            &ctx,
            &DecodeArgs {
                checkpoint,
                data: &eval.data,
                split: &eval.split,
                mechanism: &mechanism.to_override(),
                beam: eval.beam,
                limit: eval.limit,
                dump: *dump,
            },
        ),
        Command::SweepM { checkpoint, eval, lookaheads } => commands::sweep_m(&ctx, checkpoint, lookaheads.clone(), &eval.args()),
        Command::Compare { checkpoints, eval } => commands::compare(&ctx, checkpoints, &eval.args()),
        Command::Gradcheck { probes } => commands::gradcheck(&ctx, *probes),
        Command::Render { dumps, cell } => commands::render(&ctx, dumps, *cell),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
