//! Command-line entry point: split manifests, single training runs, grid
//! sweeps, checkpoint evaluation, and gain arithmetic. Errors leave as
//! machine-readable JSON on stderr with a nonzero exit code.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use kernmix::harness::config::TrainConfig;
use kernmix::harness::grid::{relative_gain, round2, run_grid, GridSpec};
use kernmix::harness::run::{evaluate, load_datasets, split_plan, train};
use kernmix::kernel::load_bank;
use kernmix::net::load_net;

#[derive(Parser)]
#[command(
    name = "kernmix",
    about = "Metric-learning experiments: Gaussian-kernel classification with Mixup-based losses",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the labeled/fold split manifest a config implies.
    Split {
        /// Training config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Where to write the split manifest (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Number of folds to emit in independent mode.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run one training configuration.
    Train {
        /// Training config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics, checkpoint, and bank files.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a sweep over sigma, centers per class, and loss variants.
    Grid {
        /// Grid spec (TOML): a [base] config plus sweep axes.
        #[arg(long)]
        spec: PathBuf,
        /// Directory for per-run artifacts and the grid report.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint on the configured test set.
    Eval {
        /// Training config (TOML) naming the dataset and loss variant.
        #[arg(long)]
        config: PathBuf,
        /// Network checkpoint to load.
        #[arg(long)]
        net: PathBuf,
        /// Center bank for kernel classification; its stored kernel
        /// settings take precedence over the config's.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Relative accuracy gain of a new result over a baseline.
    Gain {
        /// Baseline accuracy in percent.
        #[arg(long)]
        baseline: f64,
        /// New accuracy in percent.
        #[arg(long = "new")]
        new_accuracy: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        let payload =
            serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> kernmix::Result<()> {
    match cli.command {
        Command::Split { config, out, count } => {
            let cfg = TrainConfig::load(&config)?;
            let (train_ds, _) = load_datasets(&cfg)?;
            let plan = split_plan(&cfg, &train_ds, count)?;
            plan.save(&out)?;
            println!(
                "wrote {} folds over {} items to {}",
                plan.folds.len(),
                train_ds.len(),
                out.display()
            );
        }
        Command::Train { config, out_dir } => {
            let cfg = TrainConfig::load(&config)?;
            let record = train(&cfg, out_dir.as_deref())?;
            for metric in &record.epochs {
                if let Some(acc) = metric.test_accuracy {
                    match metric.train_loss {
                        Some(loss) => {
                            println!("epoch {:>4}  loss {loss:.5}  accuracy {acc:.2}", metric.epoch)
                        }
                        None => println!("epoch {:>4}  accuracy {acc:.2}", metric.epoch),
                    }
                }
            }
            println!(
                "{}",
                serde_json::json!({
                    "variant": record.variant.name(),
                    "final_accuracy": record.final_accuracy,
                    "config_hash": record.config_hash,
                    "seed": record.seed,
                    "wall_seconds": record.timing.total_seconds,
                })
            );
        }
        Command::Grid { spec, out_dir } => {
            let spec = GridSpec::load(&spec)?;
            let report = run_grid(&spec, out_dir.as_deref())?;
            print!("{}", report.table());
        }
        Command::Eval { config, net, bank } => {
            let mut cfg = TrainConfig::load(&config)?;
            let model = load_net(&net)?;
            let bank = match bank {
                Some(path) => {
                    let (bank, kernel_cfg) = load_bank(&path)?;
                    cfg.kernel = kernel_cfg;
                    Some(bank)
                }
                None => None,
            };
            let (_, test_ds) = load_datasets(&cfg)?;
            let accuracy = evaluate(&model, bank.as_ref(), &cfg, &test_ds)?;
            println!("{}", serde_json::json!({ "accuracy": accuracy }));
        }
        Command::Gain {
            baseline,
            new_accuracy,
        } => {
            let gain = relative_gain(baseline, new_accuracy)?;
            println!(
                "{}",
                serde_json::json!({
                    "baseline": baseline,
                    "new": new_accuracy,
                    "gain": round2(gain),
                })
            );
        }
    }
    Ok(())
}
