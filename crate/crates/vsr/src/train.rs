//! Training runs on disk: log, checkpoints, resume and the run manifest.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vsr_core::trainer::{pretrain_generator, StepLog, TrainConfig, Trainer};
use vsr_core::LrHrPair;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::load_pairs;
use crate::error::{IoContext, Result, VsrError};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_PLOT: &str = "loss_curves.png";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop (with a checkpoint) once this global step is reached.
    pub max_steps: Option<u64>,
    pub resume: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub resumed_from: Option<u64>,
    pub final_step: u64,
    pub finished: bool,
    pub last_checkpoint: PathBuf,
    pub last: Option<StepLog>,
}

/// Everything needed to rerun: the resolved configuration and the build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    /// Resolved `key = value` pairs, readable back as a config file.
    pub config: Vec<(String, String)>,
    pub train_config: TrainConfig,
    pub dataset_pairs: usize,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

/// The checkpoint with the highest step: `final.ckpt` or one in `checkpoints/`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    let fin = dir.join(FINAL_CHECKPOINT);
    if fin.is_file() {
        best = Some((Checkpoint::load(&fin)?.step(), fin));
    }
    let ck = dir.join(CHECKPOINT_DIR);
    if !ck.is_dir() {
        return Ok(best.map(|(_, p)| p));
    }
    for e in fs::read_dir(&ck).at(&ck)? {
        let p = e.at(&ck)?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Log line for one step; wall time is optional so logs can be compared
/// byte for byte.
pub fn log_line(entry: &StepLog, wall_time_s: Option<f64>) -> String {
    let mut v = serde_json::to_value(entry).expect("step log serialises");
    if let (Some(t), Some(map)) = (wall_time_s, v.as_object_mut()) {
        map.insert("wall_time_s".into(), serde_json::json!(t));
    }
    v.to_string()
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let f = File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let e: StepLog =
            serde_json::from_str(&line).map_err(|e| VsrError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Drops log lines for steps at or after `step` (they will be rerun).
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).at(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: StepLog =
            serde_json::from_str(line).map_err(|e| VsrError::format(path, format!("line {}: {e}", i + 1)))?;
        if e.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).at(path)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<LrHrPair>> {
    let root = cfg
        .run
        .dataset
        .as_deref()
        .ok_or_else(|| VsrError::Config("no dataset configured (key `dataset`)".into()))?;
    let pairs = load_pairs(root, cfg.run.degrade)?;
    let c = &cfg.train;
    if let Some(p) = pairs.iter().find(|p| p.lr().dims().0 < c.crop || p.lr().dims().1 < c.crop) {
        return Err(VsrError::Data(format!(
            "scene {} has LR size {:?}, smaller than crop {}",
            p.lr().scene_id(),
            p.lr().dims(),
            c.crop
        )));
    }
    Ok(pairs)
}

fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str, pairs: usize) -> Result<()> {
    let m = RunManifest {
        schema: "vsr-run/1".into(),
        command: command.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.train.seed,
        config: cfg.to_pairs(),
        train_config: cfg.train.clone(),
        dataset_pairs: pairs,
    };
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, serde_json::to_string_pretty(&m).expect("manifest serialises")).at(&p)?;
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, cfg.to_text()).at(&p)
}

fn start_trainer(cfg: &RunConfig) -> Result<Trainer> {
    match &cfg.run.init_checkpoint {
        None => Ok(Trainer::new(cfg.train.clone())?),
        Some(p) => {
            let models = Checkpoint::load(p)?.models()?;
            if models.generator.config() != cfg.train.generator {
                return Err(VsrError::Config(format!(
                    "{}: generator architecture differs from this configuration",
                    p.display()
                )));
            }
            let mut fresh = vsr_core::trainer::Models::new(&cfg.train)?;
            if fresh.flow_params().is_some() && models.flow_params().is_some() {
                fresh.flow = models.flow;
            }
            fresh.generator = models.generator;
            Ok(Trainer::with_models(cfg.train.clone(), fresh)?)
        }
    }
}

pub fn run_training(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let pairs = load_dataset(cfg)?;
    fs::create_dir_all(out).at(out)?;
    let log_path = out.join(LOG_FILE);
    let (mut trainer, resumed_from) = match latest_checkpoint(out)? {
        Some(p) if opts.resume => {
            let ck = Checkpoint::load(&p)?;
            if ck.config != cfg.train {
                return Err(VsrError::Config(format!(
                    "{} was written with a different configuration",
                    p.display()
                )));
            }
            let step = ck.step();
            truncate_log(&log_path, step)?;
            (ck.into_trainer()?, Some(step))
        }
        _ => {
            if log_path.exists() && !opts.resume {
                return Err(VsrError::Config(format!(
                    "{} already holds a run; pass --resume or pick another output directory",
                    out.display()
                )));
            }
            if log_path.exists() {
                truncate_log(&log_path, 0)?;
            }
            write_manifest(out, cfg, "train", pairs.len())?;
            (start_trainer(cfg)?, None)
        }
    };
    let log_file = OpenOptions::new().create(true).append(true).open(&log_path).at(&log_path)?;
    let mut log = BufWriter::new(log_file);
    let started = Instant::now();
    let total = cfg.train.total_steps;
    let report_every = (total / 20).max(1);
    let mut last = None;
    let stop_at = opts.max_steps.unwrap_or(u64::MAX).min(total);
    let mut last_checkpoint = None;
    while trainer.step() < stop_at {
        let entry = trainer.step_on(&pairs)?;
        let wall = cfg.run.log_wall_time.then(|| started.elapsed().as_secs_f64());
        writeln!(log, "{}", log_line(&entry, wall)).at(&log_path)?;
        log.flush().at(&log_path)?;
        let step = trainer.step();
        if cfg.run.checkpoint_every > 0 && step % cfg.run.checkpoint_every == 0 && step < total {
            let p = out.join(CHECKPOINT_DIR).join(checkpoint_name(step));
            Checkpoint::of(&trainer).save(&p)?;
            last_checkpoint = Some(p);
        }
        if opts.verbose && (step % report_every == 0 || step == stop_at) {
            eprintln!(
                "step {step}/{total} phase={} total={:.6} pixel={:.6} d={:.4}",
                entry.phase.as_str(),
                entry.generator.total,
                entry.generator.terms.pixel,
                entry.discriminator
            );
        }
        last = Some(entry);
    }
    let finished = trainer.is_done();
    let ck = Checkpoint::of(&trainer);
    let path = if finished {
        let p = out.join(FINAL_CHECKPOINT);
        ck.save(&p)?;
        let entries = read_log(&log_path)?;
        // Plots are a convenience; a missing font or odd data must not fail a run.
        if let Err(e) = crate::plot::loss_curves(&[("train".to_string(), entries)], &out.join(LOSS_PLOT)) {
            eprintln!("warning: loss plot skipped: {e}");
        }
        p
    } else {
        match last_checkpoint {
            Some(p) if p.ends_with(checkpoint_name(trainer.step())) => p,
            _ => {
                let p = out.join(CHECKPOINT_DIR).join(checkpoint_name(trainer.step()));
                ck.save(&p)?;
                p
            }
        }
    };
    Ok(TrainOutcome {
        output_dir: out.to_path_buf(),
        resumed_from,
        final_step: trainer.step(),
        finished,
        last_checkpoint: path,
        last,
    })
}

/// Generator-only pretraining; the resulting checkpoint is meant for the
/// `init_checkpoint` key of a later run.
pub fn run_pretrain(cfg: &RunConfig, steps: u64, out: &Path) -> Result<Checkpoint> {
    let pairs = load_dataset(cfg)?;
    let models = pretrain_generator(&cfg.train, &pairs, steps)?;
    let trainer = Trainer::with_models(cfg.train.clone(), models)?;
    let ck = Checkpoint::of(&trainer);
    ck.save(out)?;
    Ok(ck)
}
