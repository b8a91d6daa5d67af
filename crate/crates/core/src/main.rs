use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use samlp::cli::{
    cmd_eval, cmd_export, cmd_grad_report, cmd_sweep_density, cmd_train, report::grad_table, DataSource, ExportKind,
    RunConfig,
};
use samlp::models::Variant;

#[derive(Parser)]
#[command(name = "samlp", version, about = "Shift/adder MLPs for point-cloud classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write config, metrics and checkpoints to --out.
    Train {
        #[arg(long, default_value = "sa")]
        variant: Variant,
        #[arg(long, default_value = "synthetic")]
        data: DataSource,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Defaults to 60 for synthetic data and 200 for ModelNet40.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Points per training cloud, to retrain at a lower density.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Start from a saved config.toml; other flags given explicitly override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Test-split accuracy of a checkpoint, overall and per class.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<DataSource>,
        #[arg(long)]
        density: Option<usize>,
    },
    /// Evaluate a checkpoint at four decreasing point densities.
    SweepDensity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<DataSource>,
    },
    /// Weight-gradient RMS per embedding and encoder layer.
    GradReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<DataSource>,
        #[arg(long, default_value_t = 4)]
        batches: usize,
    },
    /// Export weight histograms, pooled features or packed shift weights.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<DataSource>,
        /// weights_hist, features or packed_shift
        #[arg(long)]
        what: ExportKind,
        #[arg(long, default_value = "export")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> samlp::Result<()> {
    match cli.command {
        Command::Train {
            variant,
            data,
            seed,
            epochs,
            batch_size,
            points,
            out,
            config,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::new(variant, data, seed, &out),
            };
            cfg.out = out;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(p) = points {
                cfg.set_points(p);
            }
            let summary = cmd_train(&cfg)?;
            println!(
                "final test accuracy {:.4} (best {:.4} at epoch {}); run directory {}",
                summary.final_test_accuracy,
                summary.best_test_accuracy,
                summary.best_epoch,
                summary.run_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            density,
        } => {
            let report = cmd_eval(&checkpoint, data.as_ref(), density)?;
            println!(
                "density {} accuracy {:.4} ({}/{})",
                report.density, report.accuracy, report.correct, report.total
            );
            for (class, acc) in &report.per_class {
                println!("  {class:<16} {acc:.4}");
            }
        }
        Command::SweepDensity { checkpoint, data } => {
            for r in cmd_sweep_density(&checkpoint, data.as_ref())? {
                println!("density {:>5} accuracy {:.4}", r.density, r.accuracy);
            }
        }
        Command::GradReport {
            checkpoint,
            data,
            batches,
        } => {
            let rows = cmd_grad_report(&checkpoint, data.as_ref(), batches)?;
            print!("{}", grad_table(&rows));
        }
        Command::Export {
            checkpoint,
            data,
            what,
            out,
        } => {
            for path in cmd_export(&checkpoint, data.as_ref(), what, &out)? {
                println!("{}", path.display());
            }
        }
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
