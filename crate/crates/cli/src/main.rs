use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frz_core::config::{load_json, ExperimentConfig, PolicyConfig};
use frz_core::dataset_gen::{generate, generate_from_config, DatasetFile, GenConfig};
use frz_core::experiment::{load_summary, run_experiment, write_outputs};
use frz_core::nn::{load_checkpoint, save_checkpoint};
use frz_core::policies::PolicyKind;
use frz_core::predictor::{self, train_predictor, PredictorTrainConfig};
use frz_core::report::{render, report};
use frz_core::tasks::load_task;
use frz_core::{FrzError, Result};

/// Layer-freezing experiments: dataset generation, predictor training,
/// policy runs and reports.
#[derive(Parser)]
#[command(name = "frz", version)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reference and a CKA-labelled generation run, then write
    /// `dataset.frzd`, `reference.frz1` and `cka.csv`.
    GenDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Shifts every seed in the config by this amount.
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse this reference checkpoint instead of training one.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train the freeze predictor on one or more datasets and write
    /// `predictor.frzp` and `history.json`.
    TrainPredictor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the initialisation and shuffling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
    },
    /// Run one experiment and write `summary.json`, `trace.csv` and `events.csv`.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured policy with this kind at its defaults.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare completed runs from their `summary.json` files.
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Also write the table to `report.txt` here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FrzError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn execute(cli: &Cli) -> Result<()> {
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::GenDataset { config, out_dir, seed, reference } => {
            let mut cfg: GenConfig = load_json(config)?;
            if let Some(k) = seed {
                cfg = cfg.with_seed_offset(*k);
            }
            cfg.validate()?;
            make_dir(out_dir)?;
            let (reference, generated) = match reference {
                Some(path) => {
                    let reference = load_checkpoint(path)?;
                    let task = load_task(&cfg.task, cfg.probe_seed)?;
                    let generated = generate(&cfg, &task, &reference)?;
                    (reference, generated)
                }
                None => generate_from_config(&cfg)?,
            };
            let [neg, pos] = generated.dataset.label_counts();
            generated.dataset.save(&out_dir.join("dataset.frzd"))?;
            save_checkpoint(&reference, &out_dir.join("reference.frz1"))?;
            fs::write(out_dir.join("cka.csv"), generated.trace.to_csv())?;
            say(format!("{} records ({neg} continue, {pos} freeze) in {}", neg + pos, out_dir.display()));
        }
        Command::TrainPredictor { config, out_dir, seed, datasets } => {
            let mut cfg: PredictorTrainConfig = load_json(config)?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            cfg.validate()?;
            let parts = datasets.iter().map(|p| DatasetFile::load(p)).collect::<Result<Vec<_>>>()?;
            let data = DatasetFile::concat(&parts)?;
            if cfg.dims.input != data.tailored_size {
                return Err(FrzError::DimensionMismatch(format!(
                    "predictor input {} but dataset snapshots hold {} values",
                    cfg.dims.input, data.tailored_size
                )));
            }
            make_dir(out_dir)?;
            let out = train_predictor(&data.records, &cfg)?;
            predictor::save(&out.params, data.window, &out_dir.join("predictor.frzp"))?;
            fs::write(out_dir.join("history.json"), serde_json::to_string_pretty(&out.history)?)?;
            say(format!(
                "best epoch {} with holdout balanced accuracy {:.3}",
                out.best_epoch, out.best_holdout_balanced_accuracy
            ));
        }
        Command::Run { config, policy, predictor, out_dir, seed } => {
            let mut cfg: ExperimentConfig = load_json(config)?;
            if let Some(p) = policy {
                let kind = PolicyKind::parse(p)?;
                if cfg.policy.kind() != kind {
                    cfg.policy = PolicyConfig::default_for(kind);
                }
            }
            if let Some(p) = predictor {
                cfg.predictor = Some(p.clone());
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = Some(d.clone());
            }
            cfg.validate()?;
            let dir = cfg
                .out_dir
                .clone()
                .ok_or_else(|| FrzError::Config("out_dir: required (set it in the config or pass --out-dir)".into()))?;
            make_dir(&dir)?;
            let outcome = run_experiment(&cfg)?;
            write_outputs(&outcome, &dir)?;
            let s = &outcome.summary;
            say(format!(
                "{} seed {}: accuracy {:.4}, {} FLOPs, {} freeze events",
                s.method,
                s.seed,
                s.test_accuracy,
                s.total_flops,
                s.freeze_events.len()
            ));
        }
        Command::Report { summaries, out_dir } => {
            let runs = summaries.iter().map(|p| load_summary(p)).collect::<Result<Vec<_>>>()?;
            let table = render(&report(&runs)?);
            if let Some(d) = out_dir {
                make_dir(d)?;
                fs::write(d.join("report.txt"), &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}
