//! Command-line driver: training, evaluation, ablation sweeps and fixtures.

pub mod commands;
pub mod config;

pub use commands::{
    ablate_weight, cmd_ablate_freqform, cmd_ablate_kernel, cmd_ablate_weight, cmd_eval, cmd_fixtures, cmd_train,
    evaluate, load_model, parse_method, write_eval, EvalOutcome, SweepRow, TrainOutcome,
};
pub use config::{split_overrides, ExperimentConfig, OUT_ENV, SNAPSHOT};

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "frl",
    version,
    about = "Frequency-regularized likelihood OOD detection",
    after_help = "Any config key can be overridden with a dotted flag, e.g. --freq.kernel_size=7 \
                  or --train.epochs=5. FRL_OUT overrides out_dir (flags still win)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint.bin and loss_curve.csv.
    Train(ConfigArg),
    /// Score the in-distribution and OOD sets with a trained checkpoint.
    Eval(ConfigArg),
    /// Sweep the weight on the high-frequency channel (VAE, inference only).
    AblateWeight {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0, 1.5, 2.0])]
        weights: Vec<f64>,
    },
    /// Retrain and evaluate once per Gaussian kernel size.
    AblateKernel {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_values_t = [3, 5, 7, 9])]
        sizes: Vec<usize>,
    },
    /// Retrain and evaluate once per high-frequency form, plus a plain baseline.
    AblateFreqform {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_values = ["gaussian", "fft", "haar"])]
        methods: Vec<String>,
    },
    /// Write toy PPM/IDX fixtures, a manifest and a toy config.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run(args: impl IntoIterator<Item = String>) -> Result<()> {
    let (args, overrides) = split_overrides(args);
    let cli = Cli::try_parse_from(args)?;
    let env_out = std::env::var(OUT_ENV).ok();
    let resolve = |c: &ConfigArg| ExperimentConfig::resolve(c.config.as_deref(), env_out.as_deref(), &overrides);
    if !overrides.is_empty() && matches!(cli.command, Command::Fixtures { .. }) {
        anyhow::bail!("fixtures takes no config overrides");
    }
    match &cli.command {
        Command::Train(c) => {
            let out = cmd_train(&resolve(c)?)?;
            println!("final loss {:.4} bits/dim", out.report.loss_curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::Eval(c) => {
            let out = cmd_eval(&resolve(c)?)?;
            for r in &out.report.auroc {
                println!("{}\t{:.4}", r.ood, r.auroc);
            }
            println!("Average\t{:.4}", out.report.average_auroc);
        }
        Command::AblateWeight { config, weights } => print_rows(&cmd_ablate_weight(&resolve(config)?, weights)?),
        Command::AblateKernel { config, sizes } => print_rows(&cmd_ablate_kernel(&resolve(config)?, sizes)?),
        Command::AblateFreqform { config, methods } => {
            let methods = methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?;
            print_rows(&cmd_ablate_freqform(&resolve(config)?, &methods)?)
        }
        Command::Fixtures { out, seed } => println!("{}", cmd_fixtures(out, *seed)?.display()),
    }
    Ok(())
}

fn print_rows(rows: &[SweepRow]) {
    for r in rows {
        println!("{}\t{:.4}", r.key, r.average);
    }
}
