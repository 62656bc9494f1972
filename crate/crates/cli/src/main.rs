//! `lmad`: data generation, training, evaluation, prediction and gradient
//! checks from the command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 numeric divergence during training.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lmad_core::checkpoint;
use lmad_core::config::{RunConfig, Task};
use lmad_core::dataset::{self, Dataset, Split};
use lmad_core::eval::{self, OraclePredictor};
use lmad_core::gradcheck::{self, GradcheckOptions, Scope};
use lmad_core::head::HeadVariant;
use lmad_core::model::Model;
use lmad_core::ply;
use lmad_core::train::{self, TrainError};

#[derive(Parser)]
#[command(name = "lmad", version, about = "Language-guided affordance detection on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_category: usize,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write the checkpoint with the best validation mIoU.
    Train {
        /// JSON run configuration; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        head: Option<HeadVariant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Write the JSON-lines log here instead of standard output.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and print the metrics report.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "full")]
        task: Task,
        /// Score the ground truth itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Predict one word on one sample and export a PLY heatmap.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// AFPC sample file.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        word: String,
        #[arg(long)]
        out_ply: PathBuf,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "ops")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include an op with a wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }

    fn verification(message: impl ToString) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Worker count from `LMAD_THREADS`, default 1.
fn threads() -> Result<usize, Failure> {
    match std::env::var("LMAD_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::usage(format!("LMAD_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn print_json(text: &str) -> CmdResult {
    let mut out = io::stdout().lock();
    writeln!(out, "{text}").map_err(Failure::usage)
}

fn gen_data(out: &Path, per_category: usize, points: usize, seed: u64) -> CmdResult {
    let manifest = dataset::build_manifest(per_category, seed, points, out).map_err(Failure::usage)?;
    eprintln!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        manifest.samples.len(),
        out.display(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    config: Option<&Path>,
    manifest: Option<PathBuf>,
    task: Option<Task>,
    head: Option<HeadVariant>,
    seed: Option<u64>,
    epochs: Option<usize>,
    max_steps: Option<usize>,
    out_ckpt: &Path,
    log: Option<&Path>,
) -> CmdResult {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).map_err(Failure::usage)?,
        None => RunConfig::default(),
    };
    cfg.manifest = manifest.or(cfg.manifest);
    cfg.task = task.unwrap_or(cfg.task);
    cfg.head = head.unwrap_or(cfg.head);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.max_steps = max_steps.or(cfg.max_steps);
    cfg.validate().map_err(Failure::usage)?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Failure::usage("no manifest given (--manifest or `manifest` in the config)"))?;
    let data = Dataset::open(&manifest).map_err(Failure::usage)?;
    let threads = threads()?;
    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let outcome = train::train(&cfg, &data, threads, Some(out_ckpt), &mut sink);
    sink.flush().map_err(Failure::usage)?;
    match outcome {
        Ok(o) => {
            eprintln!(
                "{} steps; best val mIoU {:.4}; checkpoint {}",
                o.steps,
                o.best_val.miou,
                out_ckpt.display()
            );
            Ok(())
        }
        Err(e @ TrainError::Diverged { .. }) => Err(Failure {
            code: 3,
            message: e.to_string(),
        }),
        Err(e) => Err(Failure::usage(e)),
    }
}

fn eval_cmd(ckpt: Option<&Path>, manifest: &Path, split: Split, task: Task, oracle: bool) -> CmdResult {
    let data = Dataset::open(manifest).map_err(Failure::usage)?;
    let threads = threads()?;
    let report = if oracle {
        eval::evaluate(&OraclePredictor, &data, split, task, threads)
    } else {
        let path = ckpt.ok_or_else(|| Failure::usage("--ckpt is required without --oracle"))?;
        let model: Model<f32> = checkpoint::load(path).map_err(Failure::usage)?;
        let missing = eval::missing_words(model.config.vocabulary.words(), &data.manifest.affordances);
        if !missing.is_empty() {
            return Err(Failure::usage(format!(
                "checkpoint vocabulary is missing {}",
                missing.join(", ")
            )));
        }
        eval::evaluate(&model, &data, split, task, threads)
    }
    .map_err(Failure::usage)?;
    print_json(&report.to_json())
}

fn predict_cmd(ckpt: &Path, sample: &Path, word: &str, out_ply: &Path) -> CmdResult {
    let model: Model<f32> = checkpoint::load(ckpt).map_err(Failure::usage)?;
    let sample = dataset::read_sample(sample).map_err(Failure::usage)?;
    if !model.config.vocabulary.contains(word.trim()) {
        eprintln!("warning: `{word}` is not in the vocabulary and is read as [UNK]");
    }
    let pred = model.predict(&sample.pc, word).map_err(Failure::usage)?;
    let text = ply::write_heatmap(&sample.pc.coords, &pred.probs).map_err(Failure::usage)?;
    std::fs::write(out_ply, text).map_err(|e| Failure::usage(format!("{}: {e}", out_ply.display())))?;
    let mean_prob = pred.probs.iter().sum::<f64>() / pred.len().max(1) as f64;
    let summary = serde_json::json!({
        "positive_count": pred.positive_count(),
        "mean_prob": mean_prob,
    });
    print_json(&summary.to_string())
}

fn gradcheck_cmd(scope: Scope, seed: u64, inject_fault: bool) -> CmdResult {
    let report = gradcheck::run(scope, GradcheckOptions { seed, inject_fault }).map_err(Failure::usage)?;
    print_json(&report.to_json())?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::verification(format!(
            "gradient check failed for {}",
            report.failures().join(", ")
        )))
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData {
            out,
            per_category,
            points,
            seed,
        } => gen_data(&out, per_category, points, seed),
        Command::Train {
            config,
            manifest,
            task,
            head,
            seed,
            epochs,
            max_steps,
            out_ckpt,
            log,
        } => train_cmd(
            config.as_deref(),
            manifest,
            task,
            head,
            seed,
            epochs,
            max_steps,
            &out_ckpt,
            log.as_deref(),
        ),
        Command::Eval {
            ckpt,
            manifest,
            split,
            task,
            oracle,
        } => eval_cmd(ckpt.as_deref(), &manifest, split, task, oracle),
        Command::Predict {
            ckpt,
            sample,
            word,
            out_ply,
        } => predict_cmd(&ckpt, &sample, &word, &out_ply),
        Command::Gradcheck {
            scope,
            seed,
            inject_fault,
        } => gradcheck_cmd(scope, seed, inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
