//! Command-line driver: `generate`, `train`, `track`, `eval`, `ablate` and
//! `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::evalkit::{
    default_thresholds, evaluate, evaluate_model, gt_tracks, predictions_from_tracks, render_frame, save_ppm, EvalItem,
};
use crate::learn::{
    gradcheck_target, load_checkpoint, save_checkpoint, write_loss_csv, Checkpoint, TrainConfig, Trainer,
    GRADCHECK_TARGETS,
};
use crate::synthworld::{
    load_detections_jsonl, load_gt_jsonl, save_detections_jsonl, save_gt_jsonl, write_detections, LabeledSequence,
    Scenario, SuiteConfig,
};
use crate::trackman::{save_tracks_json, track_sequence, load_tracks_json, Thresholds, TracksFile};

pub use config::{apply as apply_overrides, parse_override, set_path};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "trackgraph", version, about = "Recurrent graph-network track manager on synthetic detection streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON configuration file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value`, dotted keys for nested fields. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic world and write its detection stream as JSON Lines.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the ground truth here.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.json, loss.csv and run.json into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of NAME.dets.jsonl / NAME.gt.jsonl pairs; sampled from the
        /// configured suite when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Track a detection stream with a trained checkpoint.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Evaluate track files against ground truth (paired in order).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        tracks: Vec<PathBuf>,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        /// Write one PPM per frame of the first sequence here.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Train a named ablation and evaluate it on held-out sequences.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 32)]
        eval_sequences: usize,
    },
    /// Finite-difference gradient check of one target, or `all`.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Taken from the ground truth when absent.
    pub num_classes: Option<usize>,
    pub scenario: String,
    /// Pixels per grid cell in renders.
    pub render_scale: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            num_classes: None,
            scenario: "all".into(),
            render_scale: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { tolerance: 1e-4 }
    }
}

fn stamp(command: &str, config: &impl Serialize, seed: Option<u64>) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": serde_json::to_value(config).unwrap_or(Value::Null),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn require_out(common: &Common) -> CliResult<&Path> {
    common.out.as_deref().ok_or_else(|| CliError::usage("--out is required"))
}

fn generate(common: &Common, frames: Option<usize>, gt_path: Option<&Path>) -> CliResult<()> {
    let mut cfg: SuiteConfig = config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(f) = frames {
        cfg.world.frames = f;
    }
    cfg.world.validate().map_err(|e| CliError::usage(e.to_string()))?;
    cfg.noise.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let seed = common.seed.unwrap_or(cfg.world.seed);
    let seq = cfg.sample(seed)?;
    let meta = json!({ "scenario": seq.scenario, "run": stamp("generate", &cfg, Some(seed)) });
    match &common.out {
        Some(p) => {
            save_detections_jsonl(&seq.detections, p)?;
            write_json(&sidecar(p), &meta)?;
        }
        None => {
            let stdout = std::io::stdout();
            write_detections(&seq.detections, stdout.lock())?;
            eprintln!("{meta}");
        }
    }
    if let Some(g) = gt_path {
        save_gt_jsonl(&seq.gt, g)?;
    }
    Ok(())
}

/// `NAME.dets.jsonl` with a matching `NAME.gt.jsonl`, in name order.
fn load_dataset(dir: &Path) -> CliResult<Vec<LabeledSequence>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".dets.jsonl")).map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!("{}: no *.dets.jsonl files", dir.display()),
        });
    }
    names
        .iter()
        .map(|n| {
            let detections = load_detections_jsonl(dir.join(format!("{n}.dets.jsonl")))?;
            let gt = load_gt_jsonl(dir.join(format!("{n}.gt.jsonl")))?;
            Ok(LabeledSequence {
                gt,
                detections,
                scenario: Scenario::Random,
            })
        })
        .collect()
}

fn train_config(common: &Common, ablation: Option<&str>) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(name) = ablation {
        cfg = cfg.with_ablation(name).map_err(|e| CliError::usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

fn train_into(cfg: &TrainConfig, data: Vec<LabeledSequence>, out: &Path, command: &str) -> CliResult<Trainer> {
    fs::create_dir_all(out)?;
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let result = trainer.run_to_end();
    write_loss_csv(&trainer.curve, fs::File::create(out.join("loss.csv"))?)?;
    write_json(&out.join("run.json"), &stamp(command, cfg, Some(cfg.seed)))?;
    result?;
    save_checkpoint(
        &Checkpoint::from_model(&trainer.model, Some(cfg), trainer.iteration()),
        out.join("checkpoint.json"),
    )?;
    Ok(trainer)
}

fn train(common: &Common, data: Option<&Path>) -> CliResult<()> {
    let cfg = train_config(common, None)?;
    let out = require_out(common)?;
    let data = match data {
        Some(d) => load_dataset(d)?,
        None => cfg.training_set()?,
    };
    let trainer = train_into(&cfg, data, out, "train")?;
    if let Some(last) = trainer.curve.last() {
        println!("iterations {} final loss {:.6}", last.iteration, last.loss.total);
    }
    Ok(())
}

fn track(common: &Common, checkpoint: &Path, detections: &Path) -> CliResult<()> {
    let th: Thresholds = config::load(common.config.as_deref(), &common.overrides)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let train_seed = ckpt.train.as_ref().map(|t| t.seed);
    let model = ckpt.into_model()?;
    let dets = load_detections_jsonl(detections)?;
    let memory = track_sequence(&model, &dets.frames, &th)?;
    let mut file = TracksFile::from_memory(&memory, model.config.grid);
    file.meta = Some(json!({
        "run": stamp("track", &th, common.seed.or(train_seed)),
        "model": model.config,
        "checkpoint": checkpoint.display().to_string(),
    }));
    match &common.out {
        Some(p) => save_tracks_json(&file, p)?,
        None => println!("{}", serde_json::to_string(&file).map_err(Error::from)?),
    }
    Ok(())
}

fn eval(common: &Common, tracks: &[PathBuf], gts: &[PathBuf], render: Option<&Path>) -> CliResult<()> {
    let cfg: EvalConfig = config::load(common.config.as_deref(), &common.overrides)?;
    if tracks.len() != gts.len() {
        return Err(CliError::usage(format!("{} --tracks but {} --gt", tracks.len(), gts.len())));
    }
    let mut items = Vec::new();
    let mut num_classes = cfg.num_classes;
    for (tp, gp) in tracks.iter().zip(gts) {
        let file = load_tracks_json(tp)?;
        let gt = load_gt_jsonl(gp)?;
        if gt.grid != file.grid && !gt.objects.is_empty() {
            return Err(CliError {
                code: EXIT_DATA,
                message: format!("{}: grid {} but ground truth grid {}", tp.display(), file.grid, gt.grid),
            });
        }
        num_classes = num_classes.or(Some(gt.num_classes));
        items.push(EvalItem {
            scenario: cfg.scenario.clone(),
            predictions: predictions_from_tracks(&file)?,
            ground_truth: gt_tracks(&gt),
        });
        if let (Some(dir), 1) = (render, items.len()) {
            fs::create_dir_all(dir)?;
            let item = &items[0];
            for t in 0..gt.frames.max(file.num_frames) {
                let img = render_frame(&item.ground_truth, &item.predictions, file.grid, t, cfg.render_scale);
                save_ppm(&img, dir.join(format!("frame{t:03}.ppm")))?;
            }
        }
    }
    let mut report = evaluate(&items, num_classes.unwrap_or(0), &cfg.thresholds);
    report.meta = Some(stamp("eval", &cfg, common.seed));
    print!("{}", report.to_table());
    if let Some(p) = &common.out {
        report.save_json(p)?;
    }
    Ok(())
}

fn ablate(common: &Common, name: &str, eval_sequences: usize) -> CliResult<()> {
    let cfg = train_config(common, Some(name))?;
    let out = require_out(common)?;
    let held_out = cfg.held_out_set(eval_sequences)?;
    let trainer = train_into(&cfg, cfg.training_set()?, out, "ablate")?;
    let mut report = evaluate_model(&trainer.model, &trainer.thresholds, &held_out)?;
    report.meta = Some(json!({ "ablation": name, "run": stamp("ablate", &cfg, Some(cfg.seed)) }));
    report.save_json(out.join("report.json"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn gradcheck(common: &Common, target: &str) -> CliResult<()> {
    let cfg: GradcheckConfig = config::load(common.config.as_deref(), &common.overrides)?;
    let targets: Vec<&str> = if target == "all" {
        GRADCHECK_TARGETS.to_vec()
    } else if GRADCHECK_TARGETS.contains(&target) {
        vec![target]
    } else {
        return Err(CliError::usage(format!(
            "unknown target {target:?}; expected all or one of {}",
            GRADCHECK_TARGETS.join(", ")
        )));
    };
    let seed = common.seed.unwrap_or(0);
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for t in targets {
        let r = gradcheck_target(t, seed)?;
        println!(
            "{t:<12} max_rel_error {:.3e} checked {} skipped {} worst {}",
            r.max_rel_error, r.checked, r.skipped, r.worst
        );
        worst = worst.max(r.max_rel_error);
        rows.push(json!({ "target": t, "max_rel_error": r.max_rel_error, "checked": r.checked, "skipped": r.skipped }));
    }
    if let Some(p) = &common.out {
        write_json(p, &json!({ "results": rows, "run": stamp("gradcheck", &cfg, Some(seed)) }))?;
    }
    if !(worst < cfg.tolerance) {
        return Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("max relative error {worst:.3e} exceeds {:.1e}", cfg.tolerance),
        });
    }
    Ok(())
}

/// Caps the global worker pool at `TRACKGRAPH_THREADS` when set.
fn init_threads() {
    if let Some(n) = std::env::var("TRACKGRAPH_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate { common, frames, gt } => generate(common, *frames, gt.as_deref()),
        Command::Train { common, data } => train(common, data.as_deref()),
        Command::Track {
            common,
            checkpoint,
            detections,
        } => track(common, checkpoint, detections),
        Command::Eval {
            common,
            tracks,
            gt,
            render,
        } => eval(common, tracks, gt, render.as_deref()),
        Command::Ablate {
            common,
            name,
            eval_sequences,
        } => ablate(common, name, *eval_sequences),
        Command::Gradcheck { common, target } => gradcheck(common, target),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match dispatch(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
