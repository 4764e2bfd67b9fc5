mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use igt_core::train::Arm;

#[derive(Parser, Debug)]
#[command(name = "igt", version, about = "Gated language-model experiments: corpus, training, drift bench, x-ray")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment config (JSON). Defaults to the built-in desk preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (corpus, init, batching, sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; every artifact is written here.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Gate strength used for evaluation and decoding.
    #[arg(long, global = true)]
    pub alpha: Option<f32>,
    /// Number of optimizer steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus, vocabulary and stopword list.
    GenCorpus,
    /// Pretrain the backbone and token head.
    Pretrain,
    /// Train the adapters of one arm on top of the pretrained backbone.
    Train {
        #[arg(long)]
        arm: Arm,
        /// Backbone checkpoint; defaults to `<out>/backbone.igt`.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Validation token loss and perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Adversarial drift benchmark over both arms.
    BenchDrift {
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        gated: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<usize>,
    },
    /// Per-token effect of the gate on one prompt.
    Xray {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Decode a continuation of a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f32>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return fail(&run::Failure::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    if let Err(e) = run::init_threads() {
        return fail(&e);
    }
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &run::Failure) -> ExitCode {
    eprintln!("{}", e.line());
    ExitCode::from(e.code())
}
