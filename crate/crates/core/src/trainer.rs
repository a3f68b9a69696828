//! Experiment presets and the alternating optimisation step.
//!
//! One step updates the discriminator on real versus generated triplets
//! (when the adversarial weight is positive), then the generator and the
//! flow network on the weighted objective evaluated with the updated
//! discriminator. Every random draw comes from one seeded stream whose
//! position is part of the saved state, so runs resume exactly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{crop_pair_at, draw_crop_offset};
use crate::discriminator::{Discriminator, DiscriminatorConfig, DISCRIMINATOR_GROUP};
use crate::error::{Error, Result};
use crate::flow::{ClassicalFlow, FlowEstimator, LearnedFlow, LearnedFlowConfig};
use crate::frame::{LrHrPair, VideoClip};
use crate::generator::{neighbor_indices, Generator, GeneratorConfig};
use crate::graph::{Graph, Var};
use crate::losses::{
    feature_loss_var, gan_loss_d_var, gan_loss_g_var, pingpong_indices, pingpong_loss_var, total_generator_loss,
    warping_loss_var, GanForm, LossBundle, LossTerms, LossWeights,
};
use crate::nn::ParamStore;
use crate::optim::{accumulate_grads, scale_grads, scheduled_lr, Adam, AdamParams};
use crate::tensor::Tensor;
use crate::SCALE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Exp4_1,
    Exp4_2,
    Exp4_3,
    RbpnOnly,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Exp4_1, Preset::Exp4_2, Preset::Exp4_3, Preset::RbpnOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Exp4_1 => "exp4_1",
            Preset::Exp4_2 => "exp4_2",
            Preset::Exp4_3 => "exp4_3",
            Preset::RbpnOnly => "rbpn_only",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (exp4_1, exp4_2, exp4_3, rbpn_only)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FlowKind {
    Zero,
    Learned(LearnedFlowConfig),
    PyramidClassical,
}

impl FlowKind {
    pub fn build(&self, seed: u64) -> Result<FlowEstimator> {
        Ok(match self {
            FlowKind::Zero => FlowEstimator::Zero,
            FlowKind::Learned(c) => FlowEstimator::Learned(LearnedFlow::new(*c, seed)?),
            FlowKind::PyramidClassical => FlowEstimator::Classical(ClassicalFlow::default()),
        })
    }
}

/// Fully resolved training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub n_neighbors: usize,
    pub use_pingpong: bool,
    pub pretrain_generator_steps: u64,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub adam: AdamParams,
    pub batch_size: usize,
    pub crop: usize,
    pub scale: usize,
    /// Consecutive frames per training sample.
    pub clip_frames: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub gan_form: GanForm,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub flow: FlowKind,
}

/// Keys accepted by [`TrainConfig::resolve`].
pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "n_neighbors",
    "use_pingpong",
    "pretrain_generator_steps",
    "total_steps",
    "learning_rate",
    "lr_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "crop",
    "scale",
    "clip_frames",
    "seed",
    "lambda_adv",
    "lambda_pixel",
    "lambda_pp",
    "lambda_feat",
    "lambda_warp",
    "feature_layer_weights",
    "gan_form",
    "base_channels",
    "n_residual_blocks",
    "bicubic_skip",
    "disc_widths",
    "include_warped_triplet",
    "flow",
    "flow_levels",
    "flow_width",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p)).collect()
}

impl TrainConfig {
    /// Defaults of a preset before any override.
    pub fn preset(p: Preset) -> Self {
        let mut c = TrainConfig {
            preset: p,
            n_neighbors: 3,
            use_pingpong: false,
            pretrain_generator_steps: 0,
            total_steps: 2000,
            learning_rate: 1e-4,
            lr_decay: 0.5,
            adam: AdamParams::default(),
            batch_size: 4,
            crop: 32,
            scale: SCALE,
            clip_frames: 5,
            seed: 0,
            weights: LossWeights::default(),
            gan_form: GanForm::NonSaturating,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            flow: FlowKind::Learned(LearnedFlowConfig::default()),
        };
        match p {
            Preset::Exp4_1 => {
                c.n_neighbors = 2;
                c.use_pingpong = true;
            }
            Preset::Exp4_2 => c.weights.pp = 0.0,
            Preset::Exp4_3 => {
                c.weights.pp = 0.0;
                c.pretrain_generator_steps = Self::default_pretrain(c.total_steps);
            }
            Preset::RbpnOnly => {
                c.weights.adv = 0.0;
                c.weights.feat = 0.0;
                c.weights.pp = 0.0;
            }
        }
        c.generator.n_neighbors = c.n_neighbors;
        c
    }

    /// A quarter of the run, at least one step.
    pub fn default_pretrain(total: u64) -> u64 {
        (total / 4).max(1)
    }

    /// Applies `key = value` assignments (one of them may be `preset`) on
    /// top of the preset defaults, then checks the preset invariants.
    pub fn resolve(assignments: &[(&str, &str)]) -> Result<Self> {
        let mut seen: Vec<&str> = Vec::new();
        for (k, _) in assignments {
            if !CONFIG_KEYS.contains(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            if seen.contains(k) {
                return Err(Error::Config(format!("config key {k:?} given twice")));
            }
            seen.push(k);
        }
        let preset = match assignments.iter().find(|(k, _)| *k == "preset") {
            Some((_, v)) => v.trim().parse()?,
            None => Preset::Exp4_2,
        };
        let mut c = TrainConfig::preset(preset);
        let mut flow_levels = None;
        let mut flow_width = None;
        for &(k, v) in assignments {
            match k {
                "preset" => {}
                "n_neighbors" => c.n_neighbors = parse(k, v)?,
                "use_pingpong" => c.use_pingpong = parse_bool(k, v)?,
                "pretrain_generator_steps" => c.pretrain_generator_steps = parse(k, v)?,
                "total_steps" => c.total_steps = parse(k, v)?,
                "learning_rate" => c.learning_rate = parse(k, v)?,
                "lr_decay" => c.lr_decay = parse(k, v)?,
                "adam_beta1" => c.adam.beta1 = parse(k, v)?,
                "adam_beta2" => c.adam.beta2 = parse(k, v)?,
                "adam_eps" => c.adam.eps = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "crop" => c.crop = parse(k, v)?,
                "scale" => c.scale = parse(k, v)?,
                "clip_frames" => c.clip_frames = parse(k, v)?,
                "seed" => c.seed = parse(k, v)?,
                "lambda_adv" => c.weights.adv = parse(k, v)?,
                "lambda_pixel" => c.weights.pixel = parse(k, v)?,
                "lambda_pp" => c.weights.pp = parse(k, v)?,
                "lambda_feat" => c.weights.feat = parse(k, v)?,
                "lambda_warp" => c.weights.warp = parse(k, v)?,
                "feature_layer_weights" => c.weights.feature_layers = parse_list(k, v)?,
                "gan_form" => {
                    c.gan_form = match v.trim() {
                        "non-saturating" => GanForm::NonSaturating,
                        "minimax" => GanForm::Minimax,
                        _ => return Err(Error::Config(format!("invalid gan_form {v:?}"))),
                    }
                }
                "base_channels" => c.generator.base_channels = parse(k, v)?,
                "n_residual_blocks" => c.generator.n_residual_blocks = parse(k, v)?,
                "bicubic_skip" => c.generator.bicubic_skip = parse_bool(k, v)?,
                "disc_widths" => c.discriminator.widths = parse_list(k, v)?,
                "include_warped_triplet" => c.discriminator.include_warped_triplet = parse_bool(k, v)?,
                "flow" => {
                    c.flow = match v.trim() {
                        "zero" => FlowKind::Zero,
                        "learned" => FlowKind::Learned(LearnedFlowConfig::default()),
                        "pyramid-classical" => FlowKind::PyramidClassical,
                        _ => return Err(Error::Config(format!("invalid flow {v:?}"))),
                    }
                }
                "flow_levels" => flow_levels = Some(parse(k, v)?),
                "flow_width" => flow_width = Some(parse(k, v)?),
                _ => unreachable!("checked against CONFIG_KEYS"),
            }
        }
        if flow_levels.is_some() || flow_width.is_some() {
            let FlowKind::Learned(ref mut lc) = c.flow else {
                return Err(Error::Config("flow_levels / flow_width need flow = learned".into()));
            };
            lc.levels = flow_levels.unwrap_or(lc.levels);
            lc.width = flow_width.unwrap_or(lc.width);
        }
        if c.preset == Preset::Exp4_3 && !seen.contains(&"pretrain_generator_steps") {
            c.pretrain_generator_steps = Self::default_pretrain(c.total_steps);
        }
        c.generator.n_neighbors = c.n_neighbors;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let conflict = |what: &str| Err(Error::Config(format!("preset {} requires {what}", self.preset.as_str())));
        match self.preset {
            Preset::Exp4_1 => {
                if !self.use_pingpong {
                    return conflict("use_pingpong = true");
                }
                if self.n_neighbors != 2 {
                    return conflict("n_neighbors = 2");
                }
            }
            Preset::Exp4_2 | Preset::Exp4_3 => {
                if self.use_pingpong || self.weights.pp != 0.0 {
                    return conflict("use_pingpong = false and lambda_pp = 0");
                }
                if self.n_neighbors != 3 {
                    return conflict("n_neighbors = 3");
                }
            }
            Preset::RbpnOnly => {
                if self.weights.adv != 0.0 || self.weights.feat != 0.0 || self.weights.pp != 0.0 {
                    return conflict("lambda_adv = lambda_feat = lambda_pp = 0");
                }
                if self.use_pingpong {
                    return conflict("use_pingpong = false");
                }
            }
        }
        match self.preset {
            Preset::Exp4_3 => {
                if self.pretrain_generator_steps == 0 {
                    return conflict("pretrain_generator_steps > 0");
                }
            }
            _ => {
                if self.pretrain_generator_steps != 0 {
                    return conflict("pretrain_generator_steps = 0");
                }
            }
        }
        if self.pretrain_generator_steps > self.total_steps {
            return Err(Error::Config("pretrain_generator_steps exceeds total_steps".into()));
        }
        if !self.use_pingpong && self.weights.pp != 0.0 {
            return Err(Error::Config("lambda_pp > 0 needs use_pingpong = true".into()));
        }
        if self.scale != SCALE {
            return Err(Error::Config(format!("scale must be {SCALE}")));
        }
        if self.batch_size == 0 || self.crop == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size, crop and total_steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning_rate and lr_decay must be positive".into()));
        }
        if self.weights.feature_layers.len() != self.discriminator.widths.len() {
            return Err(Error::Config(format!(
                "{} feature layer weights for {} discriminator stages",
                self.weights.feature_layers.len(),
                self.discriminator.widths.len()
            )));
        }
        if self.discriminator.include_warped_triplet {
            return Err(Error::Config("include_warped_triplet is reserved and not trained yet".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.generator.n_neighbors != self.n_neighbors {
            return Err(Error::Config("generator.n_neighbors disagrees with n_neighbors".into()));
        }
        self.generator.validate()?;
        let min = self.min_clip_frames();
        if self.clip_frames < min {
            return Err(Error::ClipTooShort { what: "training sample", min, got: self.clip_frames });
        }
        Ok(())
    }

    /// Fewest frames a training sample can have under this configuration.
    pub fn min_clip_frames(&self) -> usize {
        if self.use_pingpong {
            2
        } else if self.weights.uses_discriminator() {
            3
        } else if self.weights.warp > 0.0 {
            2
        } else {
            1
        }
    }

    /// Frames fed per target, counting both ping-pong directions.
    pub fn effective_neighbors(&self) -> usize {
        self.n_neighbors * if self.use_pingpong { 2 } else { 1 }
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        if step < self.pretrain_generator_steps {
            Phase::Pretrain
        } else if self.pretrain_generator_steps > 0 {
            Phase::Adversarial
        } else {
            Phase::Train
        }
    }

    /// Loss weights in force during `phase`.
    pub fn weights_for(&self, phase: Phase) -> LossWeights {
        let mut w = self.weights.clone();
        if phase == Phase::Pretrain {
            w.adv = 0.0;
            w.feat = 0.0;
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adversarial,
    Train,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adversarial => "adversarial",
            Phase::Train => "train",
        }
    }
}

/// One entry of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    #[serde(flatten)]
    pub generator: LossBundle,
    pub discriminator: f64,
}

/// The three networks of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub generator: Generator,
    pub flow: FlowEstimator,
    pub discriminator: Discriminator,
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Models {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(Models {
            generator: Generator::new(cfg.generator, mix_seed(cfg.seed, 1))?,
            flow: cfg.flow.build(mix_seed(cfg.seed, 2))?,
            discriminator: Discriminator::new(cfg.discriminator.clone(), mix_seed(cfg.seed, 3))?,
        })
    }

    pub fn flow_params(&self) -> Option<&ParamStore> {
        match &self.flow {
            FlowEstimator::Learned(n) => Some(n.params()),
            _ => None,
        }
    }

    pub fn flow_params_mut(&mut self) -> Option<&mut ParamStore> {
        match &mut self.flow {
            FlowEstimator::Learned(n) => Some(n.params_mut()),
            _ => None,
        }
    }

    /// Deterministic clamped super-resolution of a whole LR clip.
    pub fn infer(&self, lr: &VideoClip) -> Result<VideoClip> {
        self.generator.generate_sequence(lr, &self.flow)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    fn of(a: &Adam) -> Self {
        AdamState { step: a.step, m: a.m.clone(), v: a.v.clone() }
    }

    fn restore(self, params: AdamParams, store: &ParamStore, what: &str) -> Result<Adam> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, _, p), (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if !ok {
            return Err(Error::Config(format!("{what} optimizer state does not match its parameters")));
        }
        Ok(Adam { params, step: self.step, m: self.m, v: self.v })
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub rng_word_pos_hi: u64,
    pub rng_word_pos_lo: u64,
    pub generator: Vec<(String, Tensor)>,
    pub flow: Vec<(String, Tensor)>,
    pub discriminator: Vec<(String, Tensor)>,
    pub adam_generator: AdamState,
    pub adam_flow: Option<AdamState>,
    pub adam_discriminator: AdamState,
    pub running: LossTerms,
}

pub struct Trainer {
    config: TrainConfig,
    models: Models,
    opt_g: Adam,
    opt_f: Option<Adam>,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: u64,
    running: LossTerms,
}

/// A sample's frames in generation order and its targets.
struct Sample<'a> {
    pair: &'a LrHrPair,
    /// Source frame index of every generated position.
    seq: Vec<usize>,
    lr_up: Vec<Tensor>,
}

impl<'a> Sample<'a> {
    fn new(pair: &'a LrHrPair, pingpong: bool) -> Result<Self> {
        let n = pair.len();
        let seq = if pingpong { pingpong_indices(n) } else { (0..n).collect() };
        let lr_up = pair
            .lr()
            .frames()
            .iter()
            .map(|f| {
                let mut g = Graph::new();
                let x = g.input(f.tensor().clone());
                let u = g.bicubic_upsample(x, SCALE)?;
                Ok(g.value(u).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample { pair, seq, lr_up })
    }

    fn triplets(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (1..self.seq.len().saturating_sub(1)).map(|p| [p - 1, p, p + 1])
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let models = Models::new(&config)?;
        Self::with_models(config, models)
    }

    /// Starts from given networks (e.g. a pretrained generator) with fresh
    /// optimiser state.
    pub fn with_models(config: TrainConfig, models: Models) -> Result<Self> {
        config.validate()?;
        if models.generator.config() != config.generator {
            return Err(Error::Config("generator architecture differs from the configuration".into()));
        }
        let opt_g = Adam::new(models.generator.params(), config.adam);
        let opt_f = models.flow_params().map(|p| Adam::new(p, config.adam));
        let opt_d = Adam::new(models.discriminator.params(), config.adam);
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 4));
        Ok(Trainer {
            config,
            models,
            opt_g,
            opt_f,
            opt_d,
            rng,
            step: 0,
            running: LossTerms::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn models_mut(&mut self) -> &mut Models {
        &mut self.models
    }

    pub fn into_models(self) -> Models {
        self.models
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Exponential moving average (0.99) of the generator terms.
    pub fn running(&self) -> LossTerms {
        self.running
    }

    pub fn export_state(&self) -> TrainState {
        let pos = self.rng.get_word_pos();
        TrainState {
            step: self.step,
            rng_word_pos_hi: (pos >> 64) as u64,
            rng_word_pos_lo: pos as u64,
            generator: self.models.generator.params().to_named(),
            flow: self.models.flow_params().map(ParamStore::to_named).unwrap_or_default(),
            discriminator: self.models.discriminator.params().to_named(),
            adam_generator: AdamState::of(&self.opt_g),
            adam_flow: self.opt_f.as_ref().map(AdamState::of),
            adam_discriminator: AdamState::of(&self.opt_d),
            running: self.running,
        }
    }

    pub fn from_state(config: TrainConfig, state: TrainState) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        t.models.generator.params_mut().load_named(&state.generator)?;
        t.models.discriminator.params_mut().load_named(&state.discriminator)?;
        match (t.models.flow_params_mut(), state.adam_flow) {
            (Some(p), Some(a)) => {
                p.load_named(&state.flow)?;
                t.opt_f = Some(a.restore(t.config.adam, p, "flow")?);
            }
            (None, None) => {}
            _ => return Err(Error::Config("flow network presence differs from the saved state".into())),
        }
        t.opt_g = state.adam_generator.restore(t.config.adam, t.models.generator.params(), "generator")?;
        t.opt_d = state
            .adam_discriminator
            .restore(t.config.adam, t.models.discriminator.params(), "discriminator")?;
        t.rng.set_word_pos(((state.rng_word_pos_hi as u128) << 64) | state.rng_word_pos_lo as u128);
        t.step = state.step;
        t.running = state.running;
        Ok(t)
    }

    /// Draws `batch_size` aligned crops of `clip_frames` frames.
    pub fn sample_batch(&mut self, dataset: &[LrHrPair]) -> Result<Vec<LrHrPair>> {
        if dataset.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let n = self.config.clip_frames;
        if let Some(short) = dataset.iter().find(|p| p.len() < n) {
            return Err(Error::ClipTooShort { what: "training clip", min: n, got: short.len() });
        }
        (0..self.config.batch_size)
            .map(|_| {
                let pair = &dataset[self.rng.random_range(0..dataset.len())];
                let start = self.rng.random_range(0..=pair.len() - n);
                let w = pair.window(start, n)?;
                let at = draw_crop_offset(w.lr().dims(), self.config.crop, &mut self.rng)?;
                crop_pair_at(&w, self.config.crop, at)
            })
            .collect()
    }

    /// Samples a batch and runs one step.
    pub fn step_on(&mut self, dataset: &[LrHrPair]) -> Result<StepLog> {
        let batch = self.sample_batch(dataset)?;
        self.train_step(&batch)
    }

    /// One optimisation step on an explicit batch.
    pub fn train_step(&mut self, batch: &[LrHrPair]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let min = self.config.min_clip_frames();
        if let Some(p) = batch.iter().find(|p| p.len() < min) {
            return Err(Error::ClipTooShort { what: "training sample", min, got: p.len() });
        }
        let phase = self.config.phase_at(self.step);
        let weights = self.config.weights_for(phase);
        let lr = scheduled_lr(self.config.learning_rate, self.config.lr_decay, self.step, self.config.total_steps);
        let samples = batch
            .iter()
            .map(|p| Sample::new(p, self.config.use_pingpong))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / batch.len() as f64;

        let mut d_loss = 0.0;
        if weights.adv > 0.0 {
            let mut grads = Vec::new();
            for s in &samples {
                let (loss, g) = self.discriminator_pass(s)?;
                d_loss += loss * inv;
                accumulate_grads(&mut grads, g);
            }
            scale_grads(&mut grads, inv);
            self.opt_d.update(self.models.discriminator.params_mut(), &grads, lr)?;
        }

        let mut terms = LossTerms::default();
        let (mut gg, mut gf) = (Vec::new(), Vec::new());
        for s in &samples {
            let (t, g, f) = self.generator_pass(s, &weights)?;
            terms.adv += t.adv * inv;
            terms.pixel += t.pixel * inv;
            terms.pp += t.pp * inv;
            terms.feat += t.feat * inv;
            terms.warp += t.warp * inv;
            accumulate_grads(&mut gg, g);
            accumulate_grads(&mut gf, f);
        }
        scale_grads(&mut gg, inv);
        scale_grads(&mut gf, inv);
        self.opt_g.update(self.models.generator.params_mut(), &gg, lr)?;
        if let (Some(opt), Some(store)) = (self.opt_f.as_mut(), self.models.flow_params_mut()) {
            if !gf.is_empty() {
                opt.update(store, &gf, lr)?;
            }
        }
        let bundle = total_generator_loss(&terms, &weights)?;
        let ema = |r: f64, v: f64| if self.step == 0 { v } else { 0.99 * r + 0.01 * v };
        self.running = LossTerms {
            adv: ema(self.running.adv, terms.adv),
            pixel: ema(self.running.pixel, terms.pixel),
            pp: ema(self.running.pp, terms.pp),
            feat: ema(self.running.feat, terms.feat),
            warp: ema(self.running.warp, terms.warp),
        };
        let log = StepLog { step: self.step, phase, lr, generator: bundle, discriminator: d_loss };
        self.step += 1;
        Ok(log)
    }

    /// Generates every position of the sample onto `g`; no flow gradients.
    fn generate_all(&self, g: &mut Graph, s: &Sample<'_>) -> Result<Vec<Var>> {
        let lr = s.pair.lr().frames();
        let gen = &self.models.generator;
        let nb = gen.config().n_neighbors;
        let lr_vars: Vec<Var> = lr.iter().map(|f| g.input(f.tensor().clone())).collect();
        let mut out = Vec::with_capacity(s.seq.len());
        for p in 0..s.seq.len() {
            let target = s.seq[p];
            let pack = neighbor_indices(p, s.seq.len(), nb)
                .into_iter()
                .map(|q| {
                    let src = s.seq[q];
                    let flow = self.models.flow.estimate(&lr[src], &lr[target])?;
                    Ok((lr_vars[src], g.input(flow.into_tensor())))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(gen.forward(g, lr_vars[target], &pack)?);
        }
        Ok(out)
    }

    fn discriminator_pass(&self, s: &Sample<'_>) -> Result<(f64, Vec<Option<Tensor>>)> {
        let fakes: Vec<Tensor> = {
            let mut g = Graph::new();
            g.freeze_group(crate::generator::GENERATOR_GROUP);
            let vars = self.generate_all(&mut g, s)?;
            vars.iter().map(|&v| g.value(v).clone()).collect()
        };
        let d = &self.models.discriminator;
        let hr = s.pair.hr().frames();
        let mut g = Graph::new();
        let mut terms = Vec::new();
        for tri in s.triplets() {
            let real = tri.map(|p| g.input(hr[s.seq[p]].tensor().clone()));
            let fake = tri.map(|p| g.input(fakes[p].clone()));
            let cond = tri.map(|p| g.input(s.lr_up[s.seq[p]].clone()));
            let zr = d.forward_triplets(&mut g, real, cond)?.logit;
            let zf = d.forward_triplets(&mut g, fake, cond)?.logit;
            terms.push(gan_loss_d_var(&mut g, zr, zf)?);
        }
        let n = terms.len() as f64;
        let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, 1.0 / n)).collect();
        let loss = g.weighted_sum(&weighted)?;
        let grads = g.backward(loss).for_store(d.params());
        Ok((g.scalar(loss), grads))
    }

    #[allow(clippy::type_complexity)]
    fn generator_pass(
        &self,
        s: &Sample<'_>,
        w: &LossWeights,
    ) -> Result<(LossTerms, Vec<Option<Tensor>>, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        g.freeze_group(DISCRIMINATOR_GROUP);
        let gen_vars = self.generate_all(&mut g, s)?;
        let hr = s.pair.hr().frames();
        let n = s.pair.len();
        let mut terms = LossTerms::default();
        let mut objective: Vec<(Var, f64)> = Vec::new();

        if w.pixel > 0.0 {
            let k = gen_vars.len() as f64;
            let parts = gen_vars
                .iter()
                .zip(&s.seq)
                .map(|(&v, &i)| {
                    let b = g.input(hr[i].tensor().clone());
                    Ok((g.mse(v, b)?, 1.0 / k))
                })
                .collect::<Result<Vec<_>>>()?;
            let pixel = g.weighted_sum(&parts)?;
            terms.pixel = g.scalar(pixel);
            objective.push((pixel, w.pixel));
        }
        if self.config.use_pingpong && w.pp > 0.0 {
            let backward: Vec<Var> = (0..n).map(|t| gen_vars[2 * n - 2 - t]).collect();
            let pp = pingpong_loss_var(&mut g, &gen_vars[..n], &backward)?;
            terms.pp = g.scalar(pp);
            objective.push((pp, w.pp));
        }
        if w.uses_discriminator() {
            let d = &self.models.discriminator;
            let (mut adv, mut feat) = (Vec::new(), Vec::new());
            for tri in s.triplets() {
                let cond = tri.map(|p| g.input(s.lr_up[s.seq[p]].clone()));
                let fake = tri.map(|p| gen_vars[p]);
                let out_f = d.forward_triplets(&mut g, fake, cond)?;
                if w.adv > 0.0 {
                    adv.push(gan_loss_g_var(&mut g, out_f.logit, self.config.gan_form));
                }
                if w.feat > 0.0 {
                    let real = tri.map(|p| g.input(hr[s.seq[p]].tensor().clone()));
                    let out_r = d.forward_triplets(&mut g, real, cond)?;
                    let fr: Vec<Var> = out_r.features.iter().map(|&v| g.detach(v)).collect();
                    feat.push(feature_loss_var(&mut g, &out_f.features, &fr, &w.feature_layers)?);
                }
            }
            for (list, lambda, slot) in [(adv, w.adv, &mut terms.adv), (feat, w.feat, &mut terms.feat)] {
                if list.is_empty() {
                    continue;
                }
                let k = list.len() as f64;
                let parts: Vec<(Var, f64)> = list.into_iter().map(|v| (v, 1.0 / k)).collect();
                let v = g.weighted_sum(&parts)?;
                *slot = g.scalar(v);
                objective.push((v, lambda));
            }
        }
        if w.warp > 0.0 && n >= 2 {
            let frames: Vec<Var> = s.pair.lr().frames().iter().map(|f| g.input(f.tensor().clone())).collect();
            let warp = warping_loss_var(&mut g, &frames, &self.models.flow)?;
            terms.warp = g.scalar(warp);
            objective.push((warp, w.warp));
        }
        if objective.is_empty() {
            return Ok((terms, Vec::new(), Vec::new()));
        }
        let total = g.weighted_sum(&objective)?;
        let grads = g.backward(total);
        let gg = grads.for_store(self.models.generator.params());
        let gf = self.models.flow_params().map(|p| grads.for_store(p)).unwrap_or_default();
        Ok((terms, gg, gf))
    }

    /// Mean pixel loss of the current generator on `batch` (no update).
    pub fn evaluate_pixel_loss(&self, batch: &[LrHrPair]) -> Result<f64> {
        let mut s = 0.0;
        for p in batch {
            let sample = Sample::new(p, self.config.use_pingpong)?;
            let mut g = Graph::new();
            g.freeze_group(crate::generator::GENERATOR_GROUP);
            let vars = self.generate_all(&mut g, &sample)?;
            let hr = p.hr().frames();
            let mut t = 0.0;
            for (&v, &i) in vars.iter().zip(&sample.seq) {
                t += crate::losses::pixel_loss(g.value(v), hr[i].tensor())?;
            }
            s += t / vars.len() as f64;
        }
        Ok(s / batch.len() as f64)
    }
}

/// Runs `steps` generator-only steps (adversarial and feature weights off)
/// and returns the resulting networks.
pub fn pretrain_generator(config: &TrainConfig, dataset: &[LrHrPair], steps: u64) -> Result<Models> {
    if steps == 0 {
        return Err(Error::Config("pretraining needs at least one step".into()));
    }
    let mut cfg = config.clone();
    cfg.preset = Preset::Exp4_3;
    cfg.use_pingpong = false;
    cfg.weights.pp = 0.0;
    cfg.total_steps = steps;
    cfg.pretrain_generator_steps = steps;
    let mut t = Trainer::new(cfg)?;
    while !t.is_done() {
        t.step_on(dataset)?;
    }
    Ok(t.into_models())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_with_invariants() {
        for p in Preset::ALL {
            let c = TrainConfig::resolve(&[("preset", p.as_str())]).unwrap();
            assert_eq!(c.preset, p);
            c.validate().unwrap();
        }
        let c = TrainConfig::resolve(&[("preset", "exp4_1")]).unwrap();
        assert!(c.use_pingpong);
        assert_eq!(c.effective_neighbors(), 4);
        let c = TrainConfig::resolve(&[("preset", "exp4_3"), ("total_steps", "400")]).unwrap();
        assert_eq!(c.pretrain_generator_steps, 100);
        assert_eq!(c.phase_at(99), Phase::Pretrain);
        assert_eq!(c.phase_at(100), Phase::Adversarial);
    }

    #[test]
    fn conflicting_overrides_fail() {
        for bad in [
            [("preset", "exp4_1"), ("n_neighbors", "3")],
            [("preset", "exp4_1"), ("use_pingpong", "false")],
            [("preset", "exp4_2"), ("use_pingpong", "true")],
            [("preset", "exp4_3"), ("pretrain_generator_steps", "0")],
            [("preset", "rbpn_only"), ("lambda_adv", "0.1")],
            [("preset", "exp4_2"), ("lambda_warp", "-1")],
        ] {
            assert!(TrainConfig::resolve(&bad).is_err(), "{bad:?}");
        }
        assert!(TrainConfig::resolve(&[("colour", "red")]).is_err());
        assert!(TrainConfig::resolve(&[("seed", "1"), ("seed", "2")]).is_err());
    }

    #[test]
    fn minimum_frames() {
        let c = TrainConfig::resolve(&[("preset", "exp4_2"), ("clip_frames", "2")]);
        assert!(matches!(c, Err(Error::ClipTooShort { min: 3, .. })));
        let c = TrainConfig::resolve(&[("preset", "exp4_1"), ("clip_frames", "2")]).unwrap();
        assert_eq!(c.min_clip_frames(), 2);
    }
}
