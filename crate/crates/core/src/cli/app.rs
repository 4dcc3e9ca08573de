use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use super::commands::{cmd_eval, cmd_suite, cmd_synth, cmd_train, load_spec, Split, Suite};
use super::config::RunConfig;
use crate::error::Result;

#[derive(Parser, Debug)]
#[command(name = "saml", version, about = "Multi-scenario CTR modeling lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the training commands.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set optim.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl RunArgs {
    /// Defaults, then the file, then `--set`, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg = cfg.with_overrides(&self.sets)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-scenario dataset.
    Synth {
        /// TOML synthetic spec; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant.
    Train(RunArgs),
    /// Score a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Metrics report of a baseline run, for RelaImpr.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
    },
    /// Train and compare a fixed set of variants.
    Suite {
        #[arg(value_enum)]
        suite: Suite,
        #[command(flatten)]
        run: RunArgs,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, seed, out } => {
            let mut spec = load_spec(config.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let summary = cmd_synth(&spec, &out)?;
            println!("wrote {} records to {}", summary.samples, out.display());
            println!("train {} / test {}", summary.train, summary.test);
            for (s, (c, p)) in summary.scenario_counts.iter().zip(&summary.positive_rates).enumerate() {
                println!("scenario {s}: {c} samples, positive rate {p:.4}");
            }
            println!("data hash {}", summary.data_hash);
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let a = cmd_train(&cfg)?;
            for e in &a.log {
                let auc = e.test_auc.map_or("-".into(), |v| format!("{v:.4}"));
                println!(
                    "epoch {:>3}  target {:.5}  aux {:.5}  test auc {auc}",
                    e.epoch, e.target_loss, e.aux_loss
                );
            }
            println!("checkpoint {}", a.checkpoint().display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            baseline,
            out,
            batch_size,
        } => {
            let (rep, trace) = cmd_eval(&checkpoint, &data, split, baseline.as_deref(), &out, batch_size)?;
            print!("{}", rep.to_json()?);
            if trace.is_some() {
                println!("trace {}", out.join("trace.json").display());
            }
        }
        Command::Suite { suite, run } => {
            let cfg = run.resolve()?;
            let table = cmd_suite(suite, &cfg)?;
            print!("{}", table.render());
        }
    }
    Ok(())
}

/// Entry point of the `saml` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
