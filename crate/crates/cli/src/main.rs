//! `flowdistill`: drives teacher training, trajectory synthesis, distillation,
//! the KD baseline, the mismatch sweep, sampling and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "flowdistill",
    version,
    about = "Toy-scale few-step distillation of flow-matching models"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective run config as JSON.
    Config,
    /// Train the teacher velocity model on the configured dataset.
    TrainTeacher,
    /// Generate the trajectory store from a trained teacher.
    Synth {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Distill a few-step student from the teacher and its trajectory store.
    Distill(commands::DistillArgs),
    /// Train the window-KD baseline on data shifted by a mismatch degree.
    KdBaseline {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Mismatch degree M of the distillation data.
        #[arg(long, default_value_t = 0.0)]
        mismatch: f64,
    },
    /// Run the mismatch sweep and write one CSV row per (M, seed).
    AnalyzeMismatch {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Draw samples from a velocity model with uniform Euler steps.
    Sample(commands::SampleArgs),
    /// Sample a model and report W1 and endpoint error.
    Eval(commands::EvalArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = commands::Context::new(&cli.common).and_then(|ctx| match cli.command {
        Command::Config => ctx.print_config(),
        Command::TrainTeacher => ctx.train_teacher(),
        Command::Synth { teacher } => ctx.synth(teacher),
        Command::Distill(args) => ctx.distill(args),
        Command::KdBaseline { teacher, mismatch } => ctx.kd_baseline(teacher, mismatch),
        Command::AnalyzeMismatch { teacher, store } => ctx.analyze(teacher, store),
        Command::Sample(args) => ctx.sample(args),
        Command::Eval(args) => ctx.eval(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error and its causes on one line, skipping causes whose text the
/// previous message already contains.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}
