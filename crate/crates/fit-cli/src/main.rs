use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fit_cli::commands::{run_gan, run_linreg, run_svm, CommonConfig, GanConfig};

/// Fit example models on seeded synthetic data, emitting metric CSVs and
/// checkpoints.
#[derive(Parser)]
#[command(name = "fit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Linear regression on y = 2x + 1 + noise with mean squared error
    #[command(name = "fit-linreg")]
    Linreg(CommonArgs),
    /// Linear SVM with hinge loss on two separable Gaussian blobs
    #[command(name = "fit-svm")]
    Svm(CommonArgs),
    /// GAN on a ring of Gaussians, trained as a single trial
    #[command(name = "fit-gan")]
    Gan(GanArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Total epochs to fit
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    lr: f64,
    /// Seed for every source of randomness in the run
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Samples per batch
    #[arg(long = "batch-size", default_value_t = 32, value_parser = at_least_one)]
    batch_size: usize,
    /// Directory for metrics.csv, final.ckpt, and samples.csv
    #[arg(long = "out-dir", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dimension of the generator's noise prior
    #[arg(long = "latent-dim", default_value_t = 8, value_parser = at_least_one)]
    latent_dim: usize,
    /// Number of mixture modes on the unit circle
    #[arg(long, default_value_t = 8, value_parser = at_least_one)]
    modes: usize,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err("must be a positive number".into())
    }
}

fn at_least_one(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

impl CommonArgs {
    fn into_config(self) -> CommonConfig {
        CommonConfig {
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            batch_size: self.batch_size,
            out_dir: self.out_dir,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Linreg(args) => run_linreg(&args.into_config()),
        Command::Svm(args) => run_svm(&args.into_config()),
        Command::Gan(args) => run_gan(&GanConfig {
            common: args.common.into_config(),
            latent_dim: args.latent_dim,
            modes: args.modes,
        }),
    };
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
