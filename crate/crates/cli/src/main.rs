//! `lhuc`: the command-line surface of the experiment pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lhuc", version, about = "LHUC speaker adaptation experiments on a synthetic corpus")]
struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds the corpus, training, the confidence model and adaptation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Overrides {
    /// Configuration overrides such as `two_pass.adapt.steps=20`.
    #[arg(value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus: features plus a manifest.
    GenCorpus(#[command(flatten)] Overrides),
    /// Train a speaker-independent model.
    TrainSi {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Speaker-adaptive training with per-speaker LHUC vectors.
    TrainSat {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train the confidence estimation module on a dev-split dump.
    TrainCem {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Decode a split, using any speaker vectors stored in the checkpoint.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Repeated argmax instead of beam search.
        #[arg(long)]
        greedy: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Unsupervised two-pass adaptation of the test speakers.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cem: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// WER of two-pass adaptation per ranking mode and selection percentile.
    SweepPercentile {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cem: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Recompute WER from decode files against the manifest references.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "decodes", required = true, num_args = 1..)]
        decodes: Vec<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        return commands::fail(&cli.out, &e);
    }
    let result = run(&cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::fail(&cli.out, &e),
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    use commands as c;
    let resolve = |o: &Overrides| config::resolve(cli.config.as_deref(), cli.seed, &o.set);
    let out = &cli.out;
    match &cli.command {
        Command::GenCorpus(o) => c::gen_corpus(&resolve(o)?, out),
        Command::TrainSi { data, o } => c::train(&resolve(o)?, out, data, false),
        Command::TrainSat { data, o } => c::train(&resolve(o)?, out, data, true),
        Command::TrainCem { data, model, o } => c::train_cem(&resolve(o)?, out, data, model),
        Command::Decode { data, model, split, greedy, o } => c::decode(&resolve(o)?, out, data, model, split, *greedy),
        Command::Adapt { data, model, cem, o } => c::adapt(&resolve(o)?, out, data, model, cem.as_deref()),
        Command::SweepPercentile { data, model, cem, o } => c::sweep(&resolve(o)?, out, data, model, cem.as_deref()),
        Command::Report { data, decodes, o } => c::report(&resolve(o)?, out, data, decodes),
    }
}
