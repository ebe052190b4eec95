//! Command-line front end: `mgtr <train|eval|infer|synth-data|viz-attention>`.
//!
//! Every subcommand takes `--config <file.json>` and any number of flat
//! `--key value` overrides of that config. Result paths go to stdout as one
//! JSON object; progress and logs go to stderr; failures exit nonzero with
//! `{"error": kind, "message": ...}` on stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mgtr::config::{pairs, resolve};
use mgtr::data::{self, SyntheticSceneSpec};
use mgtr::error::{MgtrError, Result};
use mgtr::evaluation::EvalConfig;
use mgtr::pipeline::{self, attention, load_checkpoint, RunConfig, Trainer, TrainingLogEntry};

#[derive(Parser)]
#[command(name = "mgtr", version, about = "One-stage mutual gaze detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config; fields missing from it keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides of individual config fields.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size model with the ResNet-50 backbone.
    Paper,
    /// Small model for synthetic scenes on a CPU.
    Toy,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; prints the best/last checkpoint and log paths.
    Train {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "paper")]
        preset: Preset,
        /// Continue from a checkpoint (its config is the base for overrides).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on an annotated split; writes a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "eval_report.json")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Detect mutual gaze in images (files or directories of PNG/JPEG).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "detections.json")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render synthetic scenes with annotations.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Export encoder and decoder attention heatmaps for one image.
    VizAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        top_k: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| {
            let line = json!({
                "level": rec.level().to_string(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn resolved<T: serde::Serialize + serde::de::DeserializeOwned>(defaults: T, common: &Common) -> Result<T> {
    resolve(defaults, common.config.as_deref(), &pairs(&common.overrides)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn progress(e: &TrainingLogEntry) {
    if let Some(ev) = &e.eval {
        eprintln!(
            "epoch {:>4} step {:>7}  {} mAP {:.4} (rare {:.4}, normal {:.4}) recall {:.4}",
            e.epoch, e.step, ev.split, ev.map, ev.ap_rare, ev.ap_normal, ev.recall
        );
    } else if let Some(l) = e.loss.as_ref().filter(|_| e.step % 10 == 0) {
        eprintln!("epoch {:>4} step {:>7}  loss {:.4}  {:.1}s", e.epoch, e.step, l.total, e.wall_secs);
    }
}

/// Image files directly named, plus the PNG/JPEG files of named directories
/// in name order.
fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<serde_json::Value> {
    let device = Device::Cpu;
    match cmd {
        Cmd::Train {
            seed,
            preset,
            resume,
            mut common,
        } => {
            common.overrides.extend(["--seed".to_string(), seed.to_string()]);
            let base = match (&resume, preset) {
                (Some(path), _) => load_checkpoint(path, &device)?.config,
                (None, Preset::Paper) => RunConfig::default(),
                (None, Preset::Toy) => RunConfig::toy(),
            };
            let cfg = resolved(base, &common)?;
            cfg.validate()?;
            let train_path = cfg
                .train_annotations
                .clone()
                .ok_or_else(|| MgtrError::Config("--train_annotations is required".into()))?;
            let train_set = data::load_dataset(&train_path)?;
            let val_set = cfg.val_annotations.as_deref().map(data::load_dataset).transpose()?;
            log::info!(
                "training on {} images{}",
                train_set.len(),
                val_set.as_ref().map(|v| format!(", validating on {}", v.len())).unwrap_or_default()
            );
            let mut trainer = match &resume {
                Some(path) => Trainer::resume(path, &device, Some(cfg))?,
                None => Trainer::new(cfg, &device)?,
            };
            let outcome = pipeline::train(&mut trainer, &train_set, val_set.as_deref(), &mut progress)?;
            log::info!("stopped: {}", outcome.stop_reason);
            Ok(serde_json::to_value(outcome)?)
        }
        Cmd::Eval {
            checkpoint,
            annotations,
            out,
            common,
        } => {
            let (model, run_cfg) = pipeline::load_model(&checkpoint, &device)?;
            let cfg: EvalConfig = resolved(run_cfg.eval, &common)?;
            let samples = data::load_dataset(&annotations)?;
            let report = pipeline::evaluate_model(&model, &samples, &cfg, run_cfg.batch_size)?;
            eprintln!(
                "mAP {:.4}  AP laeo {:.4}  AP not-laeo {:.4}  recall {:.4}  ({} images)",
                report.map, report.ap_laeo, report.ap_not_laeo, report.recall, report.num_images
            );
            write_json(&out, &report)?;
            Ok(json!({ "report": out, "map": report.map }))
        }
        Cmd::Infer {
            checkpoint,
            inputs,
            out,
            common,
        } => {
            let (model, run_cfg) = pipeline::load_model(&checkpoint, &device)?;
            let cfg: EvalConfig = resolved(run_cfg.eval, &common)?;
            let images = collect_images(&inputs)?
                .into_iter()
                .map(|p| Ok((p.display().to_string(), data::load_image(&p)?)))
                .collect::<Result<Vec<_>>>()?;
            let report = pipeline::infer(&model, &images, &cfg)?;
            eprintln!("{} images, {:.2} images/s", report.images.len(), report.images_per_sec);
            write_json(&out, &report)?;
            Ok(json!({ "report": out }))
        }
        Cmd::SynthData { out, count, common } => {
            let spec: SyntheticSceneSpec = resolved(SyntheticSceneSpec::default(), &common)?;
            let path = pipeline::synth_data(&spec, count, &out)?;
            Ok(json!({ "annotations": path, "images": count }))
        }
        Cmd::VizAttention {
            checkpoint,
            image,
            out,
            top_k,
            common,
        } => {
            let (model, run_cfg) = pipeline::load_model(&checkpoint, &device)?;
            let cfg: EvalConfig = resolved(run_cfg.eval, &common)?;
            let img = data::load_image(&image)?;
            let export = attention::export_attention(&model, &img, &out, top_k, cfg.score_threshold)?;
            Ok(serde_json::to_value(export)?)
        }
    }
}

/// Moves the subcommand's own flags (with their values) ahead of the config
/// overrides, so they may appear in any order on the command line.
fn reorder_args(args: Vec<String>) -> Vec<String> {
    let cmd = Cli::command();
    let Some(sub) = args.get(1).and_then(|name| cmd.find_subcommand(name)) else {
        return args;
    };
    let mut known = Vec::new();
    let mut rest = Vec::new();
    let mut i = 2;
    while i < args.len() {
        let name = args[i].strip_prefix("--").map(|k| k.split('=').next().unwrap_or(k));
        let arg = name.and_then(|n| sub.get_arguments().find(|a| a.get_long() == Some(n)));
        let target = if arg.is_some() { &mut known } else { &mut rest };
        target.push(args[i].clone());
        i += 1;
        if arg.is_some_and(|a| a.get_action().takes_values()) && !args[i - 1].contains('=') {
            while i < args.len() && !args[i].starts_with("--") {
                target.push(args[i].clone());
                i += 1;
            }
        } else if arg.is_none() {
            while i < args.len() && !args[i].starts_with("--") {
                target.push(args[i].clone());
                i += 1;
            }
        }
    }
    args[..2].iter().cloned().chain(known).chain(rest).collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(reorder_args(std::env::args().collect())) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    init_logging();
    match run(cli.cmd) {
        Ok(paths) => {
            println!("{paths}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
