use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hip_dreamer::runio::{self, TrainOptions, TrainOutcome};

#[derive(Parser)]
#[command(name = "hip-dreamer", version, about = "Train and inspect task-conditioned world-model agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a run from a config file.
    Train {
        config: PathBuf,
        /// Run directory; defaults to `runs/<config stem>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Stop after this many epochs; rerun the same command to resume.
        #[arg(long)]
        max_epochs: Option<u64>,
    },
    /// Evaluate the newest checkpoint of a run.
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Write latents.csv from evaluation episodes of a run.
    ExportLatents { run_dir: PathBuf },
    /// Mean and std of evaluation returns across runs, per variant and epoch.
    Compare {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), runio::RunError> {
    match cli.command {
        Command::Train { config, run_dir, max_epochs } => {
            let dir = run_dir.unwrap_or_else(|| {
                let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
                PathBuf::from("runs").join(stem)
            });
            match runio::train(&config, &dir, &TrainOptions { max_epochs })? {
                TrainOutcome::Finished(s) => {
                    println!(
                        "{}: {} epochs, {} env steps, final eval {:.3} ± {:.3}",
                        dir.display(),
                        s.epochs,
                        s.env_steps,
                        s.final_eval_mean_return,
                        s.final_eval_return_std
                    );
                }
                TrainOutcome::Paused { epoch } => println!("{}: paused after epoch {epoch}", dir.display()),
            }
        }
        Command::Eval { run_dir, episodes } => {
            let r = runio::evaluate(&run_dir, episodes)?;
            for (i, ret) in r.returns.iter().enumerate() {
                println!("episode {i}: {ret:.3}");
            }
            println!("mean {:.3} std {:.3}", r.mean_return(), r.std_return());
        }
        Command::ExportLatents { run_dir } => {
            println!("{}", runio::export_latents(&run_dir)?.display());
        }
        Command::Compare { run_dirs } => print!("{}", runio::compare(&run_dirs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
