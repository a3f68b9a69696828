//! Flat `key = value` run configuration.
//!
//! Model and optimisation keys are those of [`TrainConfig::resolve`]; the
//! keys in [`RUN_KEYS`] configure the run around it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vsr_core::dataio::DegradeParams;
use vsr_core::losses::GanForm;
use vsr_core::trainer::{FlowKind, TrainConfig, CONFIG_KEYS};

use crate::error::{IoContext, Result, VsrError};

pub const RUN_KEYS: &[&str] = &[
    "dataset",
    "output_dir",
    "checkpoint_every",
    "log_wall_time",
    "init_checkpoint",
    "degrade_sigma",
    "degrade_ksize",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub log_wall_time: bool,
    /// Networks to start from (optimiser state is not taken over).
    pub init_checkpoint: Option<PathBuf>,
    /// Used when `dataset` is a raw HR tree rather than a prepared one.
    pub degrade: DegradeParams,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            dataset: None,
            output_dir: None,
            checkpoint_every: 500,
            log_wall_time: true,
            init_checkpoint: None,
            degrade: DegradeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub run: RunSettings,
}

/// Splits config text into `(key, value)` pairs. Blank lines and lines
/// starting with `#` are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| VsrError::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(VsrError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(VsrError::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| VsrError::Config(format!("invalid value {v:?} for {key}")))
}

impl RunConfig {
    /// `base` anchors relative paths (normally the config file's directory).
    pub fn from_pairs(pairs: &[(String, String)], base: &Path) -> Result<Self> {
        let mut run = RunSettings::default();
        let mut core = Vec::new();
        let mut seen: Vec<&str> = Vec::new();
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (k, v) in pairs {
            let (k, v) = (k.as_str(), v.as_str());
            if RUN_KEYS.contains(&k) {
                if seen.contains(&k) {
                    return Err(VsrError::Config(format!("config key {k:?} given twice")));
                }
                seen.push(k);
            }
            match k {
                "dataset" => run.dataset = Some(path(v)),
                "output_dir" => run.output_dir = Some(path(v)),
                "checkpoint_every" => run.checkpoint_every = parse_num(k, v)?,
                "log_wall_time" => run.log_wall_time = parse_bool(k, v)?,
                "init_checkpoint" => run.init_checkpoint = Some(path(v)),
                "degrade_sigma" => run.degrade.sigma = parse_num(k, v)?,
                "degrade_ksize" => run.degrade.ksize = parse_num(k, v)?,
                _ if CONFIG_KEYS.contains(&k) => core.push((k, v)),
                _ => {
                    return Err(VsrError::Config(format!(
                        "unknown config key {k:?}; valid keys: {}, {}",
                        RUN_KEYS.join(", "),
                        CONFIG_KEYS.join(", ")
                    )))
                }
            }
        }
        let train = TrainConfig::resolve(&core).map_err(|e| VsrError::Config(e.to_string()))?;
        Ok(RunConfig { train, run })
    }

    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base).map_err(|e| match e {
            VsrError::Config(m) => VsrError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key with its resolved value; reading the output back yields an
    /// equal configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = train_pairs(&self.train);
        let r = &self.run;
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(d) = &r.dataset {
            push("dataset", d.display().to_string());
        }
        if let Some(d) = &r.output_dir {
            push("output_dir", d.display().to_string());
        }
        push("checkpoint_every", r.checkpoint_every.to_string());
        push("log_wall_time", r.log_wall_time.to_string());
        if let Some(d) = &r.init_checkpoint {
            push("init_checkpoint", d.display().to_string());
        }
        push("degrade_sigma", r.degrade.sigma.to_string());
        push("degrade_ksize", r.degrade.ksize.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// The [`TrainConfig`] half of [`RunConfig::to_pairs`].
pub fn train_pairs(c: &TrainConfig) -> Vec<(String, String)> {
    let w = &c.weights;
    let mut v: Vec<(&str, String)> = vec![
        ("preset", c.preset.as_str().into()),
        ("n_neighbors", c.n_neighbors.to_string()),
        ("use_pingpong", c.use_pingpong.to_string()),
        ("pretrain_generator_steps", c.pretrain_generator_steps.to_string()),
        ("total_steps", c.total_steps.to_string()),
        ("learning_rate", c.learning_rate.to_string()),
        ("lr_decay", c.lr_decay.to_string()),
        ("adam_beta1", c.adam.beta1.to_string()),
        ("adam_beta2", c.adam.beta2.to_string()),
        ("adam_eps", c.adam.eps.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("crop", c.crop.to_string()),
        ("scale", c.scale.to_string()),
        ("clip_frames", c.clip_frames.to_string()),
        ("seed", c.seed.to_string()),
        ("lambda_adv", w.adv.to_string()),
        ("lambda_pixel", w.pixel.to_string()),
        ("lambda_pp", w.pp.to_string()),
        ("lambda_feat", w.feat.to_string()),
        ("lambda_warp", w.warp.to_string()),
        ("feature_layer_weights", join(&w.feature_layers)),
        (
            "gan_form",
            match c.gan_form {
                GanForm::NonSaturating => "non-saturating",
                GanForm::Minimax => "minimax",
            }
            .into(),
        ),
        ("base_channels", c.generator.base_channels.to_string()),
        ("n_residual_blocks", c.generator.n_residual_blocks.to_string()),
        ("bicubic_skip", c.generator.bicubic_skip.to_string()),
        ("disc_widths", join(&c.discriminator.widths)),
        ("include_warped_triplet", c.discriminator.include_warped_triplet.to_string()),
    ];
    match c.flow {
        FlowKind::Zero => v.push(("flow", "zero".into())),
        FlowKind::PyramidClassical => v.push(("flow", "pyramid-classical".into())),
        FlowKind::Learned(l) => {
            v.push(("flow", "learned".into()));
            v.push(("flow_levels", l.levels.to_string()));
            v.push(("flow_width", l.width.to_string()));
        }
    }
    v.into_iter().map(|(k, s)| (k.to_string(), s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let p = parse_pairs("# run\n\npreset = exp4_1\n  seed=3  \n").unwrap();
        assert_eq!(p, vec![("preset".into(), "exp4_1".into()), ("seed".into(), "3".into())]);
    }

    #[test]
    fn missing_equals_names_the_line() {
        let e = parse_pairs("preset = exp4_2\nseed 3\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn relative_paths_follow_the_base() {
        let c = RunConfig::from_text("dataset = data/train\n", Path::new("/cfg")).unwrap();
        assert_eq!(c.run.dataset.as_deref(), Some(Path::new("/cfg/data/train")));
    }
}
