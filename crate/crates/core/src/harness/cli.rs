//! Command-line entry points. Every subcommand writes its artifacts and a
//! `manifest.json` into the output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::ablation::run_ablation;
use crate::harness::coco::Dataset;
use crate::harness::config::{RunConfig, OUTPUT_DIR_ENV};
use crate::harness::eval::{evaluate, perfect_detections};
use crate::harness::gradsuite;
use crate::harness::synth::small_fraction;
use crate::metrics::{coco_ap_report, ApReport};
use crate::model::checkpoint::{Checkpoint, MAGIC};
use crate::model::Model;
use crate::par;
use crate::training::trainer::write_loss_csv;
use crate::training::train;

#[derive(Debug, Parser)]
#[command(name = "smalldetr", version, about = "Small detection transformer: train, evaluate, ablate")]
pub struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory and the environment variable.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, then evaluate it.
    Train,
    /// Evaluate a checkpoint on the configured evaluation set.
    Eval {
        #[arg(long, required_unless_present = "perfect_stub")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth itself instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        perfect_stub: bool,
    },
    /// Train and evaluate the four ablation variants.
    Ablate,
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Write the configured synthetic dataset as annotations plus PPM images.
    Synth,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Synth => "synth",
        }
    }
}

#[derive(Debug, Serialize)]
struct Versions {
    smalldetr: &'static str,
    checkpoint_format: &'static str,
    parallel: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'static str,
    argv: Vec<String>,
    config_sha256: String,
    seed: u64,
    versions: Versions,
    config: &'a RunConfig,
}

/// Parses `argv`, runs the command and returns the process exit code.
///
/// Usage errors exit with 2, runtime failures with 1 after printing a JSON
/// error object to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            let report = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{report}");
            1
        }
    }
}

/// Config after applying `--config`, the environment and the flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            command: cli.command.name(),
            argv,
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            versions: Versions {
                smalldetr: env!("CARGO_PKG_VERSION"),
                checkpoint_format: std::str::from_utf8(MAGIC).expect("ascii magic"),
                parallel: par::is_parallel(),
            },
            config: &cfg,
        },
    )?;
    match &cli.command {
        Command::Train => cmd_train(&cfg, &out),
        Command::Eval {
            checkpoint,
            perfect_stub,
        } => cmd_eval(&cfg, &out, checkpoint.as_deref(), *perfect_stub),
        Command::Ablate => cmd_ablate(&cfg, &out),
        Command::Gradcheck { seeds } => cmd_gradcheck(&out, *seeds),
        Command::Synth => cmd_synth(&cfg, &out),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(out: &Path, report: &ApReport) -> Result<()> {
    write_json(&out.join("report.json"), &report.to_json())?;
    write_text(
        &out.join("report.csv"),
        &format!("{}\n{}\n", ApReport::CSV_HEADER, report.to_csv_row()),
    )?;
    println!("{}\n{}", ApReport::CSV_HEADER, report.to_csv_row());
    Ok(())
}

fn eval_set(cfg: &RunConfig, train_set: Option<&Dataset>) -> Result<Dataset> {
    match (&cfg.eval_data, train_set) {
        (Some(src), _) => src.load(),
        (None, Some(d)) => Ok(d.clone()),
        (None, None) => cfg.data.load(),
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let mut model = Model::new(cfg.model_config())?;
    let every = (cfg.train.iterations / 20).max(1);
    let log = train(&mut model, &data.samples(), &cfg.train_config(), |r| {
        if r.iter % every == 0 {
            log::info!("iter {} total {:.6}", r.iter, r.total);
        }
    })?;
    write_loss_csv(&out.join("loss.csv"), &log)?;
    Checkpoint::from_model(&model)?.save(&out.join("model.ckpt"))?;
    let report = evaluate(&model, &eval_set(cfg, Some(&data))?)?;
    write_report(out, &report)
}

fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, perfect: bool) -> Result<()> {
    let data = eval_set(cfg, None)?;
    let report = if perfect {
        coco_ap_report(&perfect_detections(&data), &data.coco.ground_truth())?
    } else {
        let path = checkpoint.ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
        let model = Checkpoint::load(path)?.into_model()?;
        evaluate(&model, &data)?
    };
    write_report(out, &report)
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let eval = eval_set(cfg, Some(&data))?;
    let every = (cfg.train.iterations / 10).max(1);
    let report = run_ablation(cfg, &data, &eval, |v, it, total| {
        if it % every == 0 {
            log::info!("{} iter {it} total {total:.6}", v.name);
        }
    });
    write_text(&out.join("ablation.csv"), &report.to_csv())?;
    write_text(&out.join("ablation.json"), &report.to_json())?;
    print!("{}", report.to_csv());
    if let Some(t) = report.small_object_trend() {
        println!("{t}");
    }
    if !report.is_complete() {
        return Err(Error::CheckFailed("one or more ablation variants failed; see ablation.csv".into()));
    }
    Ok(())
}

fn cmd_gradcheck(out: &Path, seeds: usize) -> Result<()> {
    let results = gradsuite::run_suite(seeds)?;
    for r in &results {
        println!(
            "{:<18} max_rel_error {:.3e} (< {:.0e}) {}",
            r.op,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    write_json(&out.join("gradcheck.json"), &results)?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("gradient check exceeded tolerance for {}", failed.join(", "))))
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let path = data.save(out)?;
    println!(
        "{} images, {} objects, small fraction {:.3}, annotations at {}",
        data.len(),
        data.coco.annotations.len(),
        small_fraction(&data.coco),
        path.display()
    );
    Ok(())
}
