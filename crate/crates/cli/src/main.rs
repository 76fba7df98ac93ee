use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use treegrad::module::apply_fn;
use treegrad::nn::{self, mse_loss, regression_setup};
use treegrad::{checkpoint, trace, vmap, AxisSpec, PyTree};

#[derive(Parser)]
#[command(
    name = "treegrad",
    version,
    about = "Train, trace and checkpoint a small MLP"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the MLP to random regression data with SGD.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Write the trained model here.
        #[arg(long)]
        ckpt_out: Option<PathBuf>,
    },
    /// Print the traced graph of the batched forward pass or the loss.
    TraceDump {
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        batch: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Save or load model checkpoints.
    Ckpt {
        #[command(subcommand)]
        action: CkptAction,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true, value_parser = parse_lr)]
    lr: f64,
}

#[derive(Subcommand)]
enum CkptAction {
    /// Train with the given settings and save the resulting model.
    Save {
        path: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Load a checkpoint and print its fingerprint.
    Load { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Forward,
    Loss,
}

fn parse_lr(s: &str) -> Result<f64, String> {
    let lr: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if lr.is_finite() && lr >= 0.0 {
        Ok(lr)
    } else {
        Err(format!(
            "learning rate must be finite and non-negative, got {s}"
        ))
    }
}

fn run(cli: Cli) -> treegrad::Result<()> {
    match cli.command {
        Command::Train { run, ckpt_out } => {
            let report = nn::train(run.seed, run.steps, run.lr)?;
            println!("initial_loss={:.16e}", report.initial_loss);
            println!("final_loss={:.16e}", report.final_loss);
            if let Some(path) = ckpt_out {
                checkpoint::save_to_path(&report.model, path)?;
            }
        }
        Command::TraceDump {
            target,
            batch,
            seed,
        } => {
            let (model, x, y) = regression_setup(seed, batch as usize)?;
            let graph = match target {
                Target::Forward => {
                    let forward = vmap(&apply_fn(), vec![AxisSpec::Broadcast, AxisSpec::Mapped]);
                    trace(|a| forward.call(a), &[model, PyTree::array(x)])?
                }
                Target::Loss => trace(
                    |a| mse_loss().call(a),
                    &[model, PyTree::array(x), PyTree::array(y)],
                )?,
            };
            print!("{graph}");
        }
        Command::Ckpt { action } => match action {
            CkptAction::Save { path, run } => {
                let report = nn::train(run.seed, run.steps, run.lr)?;
                checkpoint::save_to_path(&report.model, &path)?;
                println!("saved {}", path.display());
            }
            CkptAction::Load { path } => {
                let tree = checkpoint::load_from_path(&path)?;
                let (leaves, fp) = treegrad::flatten(&tree);
                println!("fingerprint={fp}");
                println!("leaves={}", leaves.len());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    nn::register_mlp();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
