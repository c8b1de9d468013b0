//! Experiment-harness CLI: generate synthetic cohorts, train and tune the
//! latent cross-attention models, run modality ablations, evaluate and
//! compare checkpoints, and emit per-row predictions.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tabperceiver::harness::{
    cmd_ablate, cmd_compare, cmd_eval, cmd_generate, cmd_predict, cmd_train, cmd_tune,
    ExperimentConfig, SearchSpace, Variant,
};
use tabperceiver::{data::SyntheticConfig, Result};

#[derive(Parser)]
#[command(name = "tabperceiver", version, about = "Tabular latent cross-attention experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; every stream (split, init, batching, bootstrap, search)
    /// is derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Cohort CSV; omitted means a synthetic cohort from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the config's model variant.
    #[arg(long)]
    variant: Option<String>,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(name) = &self.variant {
            config.variant = Variant::parse(name)?;
            config.validate()?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort (cohort.csv, ground_truth.json, schema.toml).
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Preprocess, fit, and evaluate on the held-out test split.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Seeded random hyperparameter search selected by validation AUC.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Number of search trials.
        #[arg(long, default_value_t = 20)]
        budget: usize,
        /// Search-space file (TOML); defaults apply when omitted.
        #[arg(long)]
        space: Option<PathBuf>,
    },
    /// Retrain with each modality group removed and tabulate AUC deltas.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Modality groups to exclude, one run each; defaults to every
        /// group in the schema.
        #[arg(long)]
        group: Vec<String>,
    },
    /// Score a checkpoint on a dataset; no parameter updates.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train two variants over shared seeds and test the AUC differences.
    Compare {
        #[command(flatten)]
        common: Common,
        /// The baseline variant (B side); the config's variant is the A side.
        #[arg(long)]
        against: String,
    },
    /// Write per-row class probabilities and assigned labels.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn schema_groups(config: &ExperimentConfig) -> Result<Vec<String>> {
    let schema = config.load_schema()?;
    let mut groups: Vec<String> = schema
        .categorical
        .iter()
        .map(|f| f.group.clone())
        .chain(schema.continuous.iter().map(|f| f.group.clone()))
        .collect();
    groups.sort();
    groups.dedup();
    Ok(groups)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { common } => {
            let synthetic = match &common.config {
                Some(path) => ExperimentConfig::load(path)?.synthetic,
                None => SyntheticConfig::default(),
            };
            cmd_generate(&synthetic, common.seed, &common.out)?;
            println!("wrote cohort.csv, ground_truth.json, schema.toml to {}", common.out.display());
        }
        Command::Train { common } => {
            let config = common.experiment()?;
            let outcome = cmd_train(&config, common.data.as_deref(), common.seed, &common.out)?;
            println!(
                "{} parameters, best epoch {} (validation AUC {:.3})\n",
                outcome.state.parameter_count,
                outcome.state.best_epoch,
                outcome.state.best_val_auc
            );
            print!("{}", outcome.report.to_text_table());
        }
        Command::Tune {
            common,
            budget,
            space,
        } => {
            let config = common.experiment()?;
            let space = match &space {
                Some(path) => SearchSpace::load(path)?,
                None => SearchSpace::default(),
            };
            let outcome = cmd_tune(
                &config,
                &space,
                budget,
                common.data.as_deref(),
                common.seed,
                &common.out,
            )?;
            println!(
                "best trial {} of {}: validation AUC {:.3}; wrote trials.json and best_config.toml",
                outcome.best_index,
                budget,
                outcome.best_val_auc
            );
        }
        Command::Ablate { common, group } => {
            let config = common.experiment()?;
            let groups = if group.is_empty() {
                schema_groups(&config)?
            } else {
                group
            };
            let table = cmd_ablate(
                &config,
                &groups,
                common.data.as_deref(),
                common.seed,
                &common.out,
            )?;
            print!("{}", table.to_text_table());
        }
        Command::Eval { common, checkpoint } => {
            let data = common.data.clone().ok_or_else(|| {
                tabperceiver::Error::Usage("eval requires --data".into())
            })?;
            let report = cmd_eval(&checkpoint, &data, common.seed, &common.out)?;
            print!("{}", report.to_text_table());
        }
        Command::Compare { common, against } => {
            let config_a = common.experiment()?;
            let mut config_b = config_a.clone();
            config_b.variant = Variant::parse(&against)?;
            config_b.validate()?;
            let report = cmd_compare(
                &config_a,
                &config_b,
                common.data.as_deref(),
                common.seed,
                &common.out,
            )?;
            print!("{}", report.to_text_table());
        }
        Command::Predict { common, checkpoint } => {
            let data = common.data.clone().ok_or_else(|| {
                tabperceiver::Error::Usage("predict requires --data".into())
            })?;
            fs::create_dir_all(&common.out)?;
            cmd_predict(&checkpoint, &data, &common.out)?;
            println!("wrote predictions.csv to {}", common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
