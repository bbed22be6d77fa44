use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tgdfer::checkpoint::Checkpoint;
use tgdfer::dataset::{Dataset, Split};
use tgdfer::eval::{self, InfluenceClass};
use tgdfer::gradcheck::{self, GradReport};
use tgdfer::prompt::VisualPromptMode;
use tgdfer::synthetic::{gen_synthetic, SyntheticSpec};
use tgdfer::train::{train, TrainConfig};

/// Tolerance used by `gradcheck`.
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "tgdfer",
    version,
    about = "Text-guided temporal MIL for facial expression bags"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-salient-frame benchmark: bags, manifest and masks.
    GenSynthetic {
        /// JSON synthetic spec; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest and write a checkpoint plus the training log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training config; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print UAR/WAR and the confusion matrix for one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write metrics.json and confusion.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame influence profiles as CSV, optionally scored against the
    /// salient masks.
    Influence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Score localization against the manifest's mask sidecar.
        #[arg(long)]
        localize: bool,
        /// Use the predicted class column instead of the label.
        #[arg(long)]
        predicted: bool,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Check features through to the bag loss instead of the temporal
        /// network alone.
        #[arg(long)]
        full_pipeline: bool,
        #[arg(long, value_enum, default_value_t = Mode::Add)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    None,
    Add,
    Prepend,
}

impl From<Mode> for VisualPromptMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => VisualPromptMode::None,
            Mode::Add => VisualPromptMode::Add,
            Mode::Prepend => VisualPromptMode::Prepend,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load(checkpoint: &Path, manifest: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = Dataset::open(manifest)?;
    ckpt.check_compatible(&dataset)?;
    Ok((ckpt, dataset))
}

fn print_report(report: &GradReport) {
    println!(
        "{:<40} {:>8} {:>12} {:>12} {:>10}",
        "parameter", "entries", "analytic", "numeric", "rel err"
    );
    for p in &report.params {
        println!(
            "{:<40} {:>8} {:>12.4e} {:>12.4e} {:>10.2e}",
            p.name, p.entries, p.analytic_norm, p.numeric_norm, p.rel_err
        );
    }
    println!("loss {:.6}, max rel err {:.2e}", report.loss, report.max_rel_err());
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenSynthetic { spec, seed, out } => {
            let spec: SyntheticSpec = read_json(spec.as_deref())?;
            let manifest = gen_synthetic(&spec, seed, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            manifest,
            config,
            seed,
            out,
        } => {
            let mut cfg: TrainConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dataset = Dataset::open(&manifest)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let (model, log) = train(&dataset, &cfg, |e| {
                eprintln!(
                    "epoch {:>3}  lr {:.1e}/{:.1e}/{:.1e}  running {:.4}  train {:.4}",
                    e.epoch, e.lr.temporal, e.lr.prompts, e.lr.head, e.running_loss, e.train_loss
                );
            })?;
            let ckpt = Checkpoint::new(&model, &cfg, &dataset, log);
            ckpt.save(out.join("checkpoint.json"))?;
            write(&out.join("train_log.json"), serde_json::to_string_pretty(&ckpt.log)?)?;
            if !dataset.test.is_empty() {
                let report = eval::evaluate(&model, &dataset.test)?;
                eprintln!("test WAR {:.4}  UAR {:.4}", report.war, report.uar);
            }
            println!("{}", out.join("checkpoint.json").display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let (ckpt, dataset) = load(&checkpoint, &manifest)?;
            let report = eval::evaluate(&ckpt.model()?, dataset.split(split))?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write(&dir.join("metrics.json"), &json)?;
                write(
                    &dir.join("confusion.csv"),
                    report.confusion_csv(&dataset.manifest.class_names),
                )?;
            }
            println!("{json}");
        }
        Command::Influence {
            checkpoint,
            manifest,
            split,
            localize,
            predicted,
            out,
        } => {
            let (ckpt, dataset) = load(&checkpoint, &manifest)?;
            let masks = if localize { Some(dataset.masks()?) } else { None };
            let model = ckpt.model()?;
            let bags = dataset.split(split);
            let preds = eval::predict_all(&model, bags)?;
            let class = if predicted {
                InfluenceClass::Predicted
            } else {
                InfluenceClass::Label
            };
            let profiles = eval::influence_profiles(&preds, bags, class)?;
            let csv = eval::influence_csv(bags, &profiles);
            match out {
                Some(path) => write(&path, csv)?,
                None => print!("{csv}"),
            }
            if let Some(masks) = masks {
                let loc = eval::localization(bags, &profiles, &masks)?;
                eprintln!("{}", serde_json::to_string(&loc)?);
            }
        }
        Command::Gradcheck {
            full_pipeline,
            mode,
            seed,
        } => {
            let report = if full_pipeline {
                gradcheck::full_pipeline(mode.into(), seed)?
            } else {
                gradcheck::temporal_only(seed)?
            };
            print_report(&report);
            if !report.passes(GRAD_TOL) {
                eprintln!(
                    "gradient check failed: max rel err {:.2e} >= {GRAD_TOL:e}",
                    report.max_rel_err()
                );
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
