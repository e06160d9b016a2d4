use std::process::ExitCode;

use clap::{Parser, Subcommand};

use embedseg_cli::commands::{
    run_ablate, run_eval, run_predict, run_synth, run_train, AblateArgs, EvalArgs, PredictArgs,
    SynthArgs, TrainArgs,
};

/// Proposal-free instance segmentation: distance-supervised pixel
/// embeddings with seeded angular clustering.
#[derive(Parser)]
#[command(name = "embedseg", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset of labeled scenes
    Synth(SynthArgs),
    /// Train a network on a dataset directory
    Train(TrainArgs),
    /// Run a checkpoint on one image
    Predict(PredictArgs),
    /// Score predicted label maps against references
    Eval(EvalArgs),
    /// Run a named comparison experiment (or `all`)
    Ablate(AblateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successes, everything else is a usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Synth(args) => run_synth(args),
        Cmd::Train(args) => run_train(args),
        Cmd::Predict(args) => run_predict(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Ablate(args) => run_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
