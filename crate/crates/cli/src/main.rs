use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use unlearn_core::config::{ExperimentConfig, DATA_ROOT_ENV};
use unlearn_core::dataset::Partition;
use unlearn_core::experiment::{Experiment, MethodId};
use unlearn_core::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Class unlearning experiments: train, invert, unlearn, evaluate, ablate.
///
/// Exit codes: 0 success, 2 invalid input or refused by policy, 3 failure
/// while running.
#[derive(Debug, Parser)]
#[command(name = "unlearn", version)]
struct Cli {
    /// Directory that relative dataset roots resolve against.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,

    /// Run only this seed instead of every configured one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the original model.
    Train(Common),
    /// Synthesize the proxy retained set from a trained model.
    Invert(Common),
    /// Unlearn the forget class and write a report.
    Unlearn {
        #[command(flatten)]
        common: Common,
        /// `covarnav`, a baseline id, or `<objective>+projection`.
        #[arg(long, short)]
        method: String,
        /// Forbid methods that read the retained training set.
        #[arg(long)]
        no_retain_access: bool,
        /// Also measure relearn times and the anamnesis index.
        #[arg(long)]
        ain: bool,
    },
    /// Compare two checkpoints, or aggregate stored reports over seeds.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "aggregate", requires = "after")]
        before: Option<PathBuf>,
        #[arg(long, requires = "before")]
        after: Option<PathBuf>,
        /// Method name recorded in the report, or the method to aggregate.
        #[arg(long, default_value = "evaluate")]
        method: String,
        #[arg(long)]
        ain: bool,
        /// Mean and spread of `<method>` reports over the configured seeds.
        #[arg(long, conflicts_with_all = ["before", "after", "ain"])]
        aggregate: bool,
        /// Where to write the report; stdout only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep covariance source and forgetting objective.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_retain_access: bool,
    },
    /// Write penultimate-layer features of several checkpoints.
    ExportEmbeddings {
        #[arg(long, short)]
        config: PathBuf,
        /// Repeat for every model; all must share one architecture.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        partition: Split,
        /// Output stem; `.bin` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn experiment(path: &PathBuf, no_retain_access: bool) -> Result<Experiment> {
    let mut config = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    if no_retain_access {
        config.retain_access = false;
    }
    Experiment::new(config)
}

fn seeds(exp: &Experiment, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| exp.config.seeds.clone(), |s| vec![s])
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let exp = experiment(&c.config, false)?;
            for seed in seeds(&exp, c.seed) {
                let out = exp.train(seed)?;
                log::info!("seed {seed}: train accuracy {:.4}", out.log.train_accuracy);
                println!("{}", out.checkpoint.display());
            }
        }
        Command::Invert(c) => {
            let exp = experiment(&c.config, false)?;
            for seed in seeds(&exp, c.seed) {
                let syn = exp.invert(seed)?;
                log::info!(
                    "seed {seed}: {} images, {:.3} on target",
                    syn.dataset.len(),
                    syn.quality.fraction_on_target
                );
                println!("{}", exp.layout.proxy_stem(seed).display());
            }
        }
        Command::Unlearn {
            common,
            method,
            no_retain_access,
            ain,
        } => {
            let method: MethodId = method.parse()?;
            let exp = experiment(&common.config, no_retain_access)?;
            for seed in seeds(&exp, common.seed) {
                let report = exp.unlearn(method, seed, ain)?;
                log::info!(
                    "seed {seed}: Df {:.4} Dft {:.4} Drt {:.4}",
                    report.acc.df.after,
                    report.acc.dft.after,
                    report.acc.drt.after
                );
                println!("{}", exp.layout.report(&method.to_string(), seed).display());
            }
        }
        Command::Evaluate {
            common,
            before,
            after,
            method,
            ain,
            aggregate,
            out,
        } => {
            let exp = experiment(&common.config, false)?;
            let value = if aggregate {
                serde_json::to_value(exp.aggregate(&method)?)?
            } else {
                let (before, after) = (before.expect("required by clap"), after.expect("required by clap"));
                let seed = common.seed.unwrap_or(exp.config.seeds[0]);
                serde_json::to_value(exp.evaluate_checkpoints(&before, &after, seed, &method, ain)?)?
            };
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&value)? + "\n";
                std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            }
            print_json(&value)?;
        }
        Command::Ablate {
            common,
            no_retain_access,
        } => {
            let mut exp = experiment(&common.config, no_retain_access)?;
            if let Some(seed) = common.seed {
                exp.config.seeds = vec![seed];
            }
            print_json(&serde_json::to_value(exp.ablate()?)?)?;
        }
        Command::ExportEmbeddings {
            config,
            checkpoints,
            partition,
            out,
        } => {
            let exp = experiment(&config, false)?;
            let partition = match partition {
                Split::Train => Partition::Train,
                Split::Test => Partition::Test,
            };
            let export = exp.export_embeddings(&checkpoints, partition, &out)?;
            log::info!(
                "{} models x {} samples x {} features",
                export.models.len(),
                export.num_samples(),
                export.dim()
            );
            let (bin, json) = unlearn_core::dataset::packed::paths(&out);
            println!("{}\n{}", bin.display(), json.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(root) = &cli.data_root {
        std::env::set_var(DATA_ROOT_ENV, root);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
