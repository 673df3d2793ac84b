use std::path::PathBuf;
use std::process::ExitCode;

use bodyfit_cli::{run, Command, FitterKind, Overrides, RunConfig};
use clap::{Parser, Subcommand};

/// Fit an articulated body model to 2D keypoints with a learned optimizer.
#[derive(Parser)]
#[command(name = "bodyfit", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fitter iterations
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true, value_enum)]
    fitter: Option<FitterKind>,
    /// components, unroll, all, or a single input mode
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a pose dataset
    GenerateData,
    /// Train the update network (or the lifting net with --fitter lift)
    Train,
    /// Fit keypoint frames from a JSON-lines file
    Fit,
    /// Evaluate a fitter on a held-out synthetic set
    Eval,
    /// Compare the analytic gradient with finite differences
    Gradcheck,
    /// Train and evaluate ablation variants
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::GenerateData => Command::GenerateData,
        Cmd::Train => Command::Train,
        Cmd::Fit => Command::Fit,
        Cmd::Eval => Command::Eval,
        Cmd::Gradcheck => Command::Gradcheck,
        Cmd::Ablate => Command::Ablate,
    };
    let overrides = Overrides { seed: cli.seed, iters: cli.iters, fitter: cli.fitter, ablation: cli.ablation, out: cli.out };
    let result = RunConfig::load(cli.config.as_deref(), &overrides).and_then(|cfg| run(command, &cfg));
    match result {
        Ok(summary) => {
            print!("{summary}");
            if !summary.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
