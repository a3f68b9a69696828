//! Training objectives and their weighted combination.
//!
//! Each objective has a plain scalar form over tensors and a graph form
//! (`*_var`) used during training. Distances are per-element means.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::flow::{warp_tensor, FlowEstimator};
use crate::frame::{Frame, VideoClip};
use crate::graph::{softplus, Graph, Var};
use crate::tensor::Tensor;

/// Denominator guard of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub pixel: f64,
    pub pp: f64,
    pub feat: f64,
    pub warp: f64,
    /// Per discriminator stage.
    pub feature_layers: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 0.01,
            pixel: 1.0,
            pp: 0.5,
            feat: 0.2,
            warp: 1.0,
            feature_layers: alloc::vec![0.25; 4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("adv", self.adv),
            ("pixel", self.pixel),
            ("pp", self.pp),
            ("feat", self.feat),
            ("warp", self.warp),
        ];
        for (n, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {n} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(v) = self.feature_layers.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("feature layer weight must be finite and >= 0, got {v}")));
        }
        if named.iter().all(|(_, v)| *v == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// True when the discriminator takes part in the generator objective.
    pub fn uses_discriminator(&self) -> bool {
        self.adv > 0.0 || self.feat > 0.0
    }
}

/// Generator adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanForm {
    /// `-ln D(G(z))`.
    #[default]
    NonSaturating,
    /// `ln(1 - D(G(z)))`, the literal min-max objective.
    Minimax,
}

/// Unweighted objective values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv: f64,
    pub pixel: f64,
    pub pp: f64,
    pub feat: f64,
    pub warp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub terms: LossTerms,
    pub total: f64,
}

pub fn total_generator_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBundle> {
    weights.validate()?;
    let t = terms;
    let parts = [
        (weights.adv, t.adv),
        (weights.pixel, t.pixel),
        (weights.pp, t.pp),
        (weights.feat, t.feat),
        (weights.warp, t.warp),
    ];
    let total = parts.iter().filter(|(w, _)| *w != 0.0).map(|(w, v)| w * v).sum();
    Ok(LossBundle { terms: *terms, total })
}

/// A palindromic clip `a_1 .. a_n .. a_1` of length `2n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PingPongSequence {
    frames: VideoClip,
    n: usize,
}

impl PingPongSequence {
    pub fn frames(&self) -> &VideoClip {
        &self.frames
    }

    pub fn original_len(&self) -> usize {
        self.n
    }

    /// Mirrored position of `i`.
    pub fn mirror(&self, i: usize) -> usize {
        2 * self.n - 2 - i
    }
}

/// Source index of each palindrome position for a clip of `n` frames.
pub fn pingpong_indices(n: usize) -> Vec<usize> {
    (0..n).chain((0..n.saturating_sub(1)).rev()).collect()
}

pub fn build_pingpong(clip: &VideoClip) -> Result<PingPongSequence> {
    let n = clip.len();
    if n < 2 {
        return Err(Error::ClipTooShort { what: "ping-pong sequence", min: 2, got: n });
    }
    let frames = pingpong_indices(n).into_iter().map(|i| clip.frames()[i].clone()).collect();
    Ok(PingPongSequence { frames: VideoClip::new(clip.scene_id(), frames)?, n })
}

pub fn pixel_loss(g: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_same_shape("pixel loss", g.shape(), b.shape())?;
    let s: f64 = g.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / g.numel() as f64)
}

pub fn pingpong_loss(forward: &[Tensor], backward: &[Tensor]) -> Result<f64> {
    if forward.len() != backward.len() || forward.is_empty() {
        return Err(Error::invalid(format!(
            "ping-pong loss over {} forward and {} backward frames",
            forward.len(),
            backward.len()
        )));
    }
    let mut s = 0.0;
    for (f, b) in forward.iter().zip(backward) {
        s += pixel_loss(f, b)?;
    }
    Ok(s / forward.len() as f64)
}

pub fn gan_loss_d_logits(real: f64, fake: f64) -> f64 {
    softplus(-real) + softplus(fake)
}

pub fn gan_loss_g_logits(fake: f64, form: GanForm) -> f64 {
    match form {
        GanForm::NonSaturating => softplus(-fake),
        GanForm::Minimax => -softplus(fake),
    }
}

/// `-[ln D(x) + ln(1 - D(G(z)))]` from probabilities.
pub fn gan_loss_d(score_real: f64, score_fake: f64) -> f64 {
    -(libm::log(score_real) + libm::log1p(-score_fake))
}

/// Non-saturating `-ln D(G(z))` from a probability.
pub fn gan_loss_g(score_fake: f64) -> f64 {
    -libm::log(score_fake)
}

/// `ln(1 - D(G(z)))`; minimised by the generator, always `<= 0`.
pub fn gan_loss_g_minimax(score_fake: f64) -> f64 {
    libm::log1p(-score_fake)
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_same_shape("cosine similarity", a.shape(), b.shape())?;
    Ok(a.dot(b) / (a.norm() * b.norm() + COSINE_EPS))
}

pub fn feature_loss(feats_g: &[Tensor], feats_b: &[Tensor], weights: &[f64]) -> Result<f64> {
    if feats_g.len() != feats_b.len() || feats_g.len() != weights.len() {
        return Err(Error::invalid(format!(
            "feature loss over {} / {} maps with {} weights",
            feats_g.len(),
            feats_b.len(),
            weights.len()
        )));
    }
    let mut s = 0.0;
    for ((a, b), w) in feats_g.iter().zip(feats_b).zip(weights) {
        s += w * (1.0 - cosine_similarity(a, b)?);
    }
    Ok(s)
}

/// Mean over `t >= 1` of `MSE(a_t, W(a_{t-1}, F(a_{t-1}, a_t)))`.
pub fn warping_loss(clip: &[Frame], est: &FlowEstimator) -> Result<f64> {
    if clip.len() < 2 {
        return Err(Error::ClipTooShort { what: "warping loss", min: 2, got: clip.len() });
    }
    let mut s = 0.0;
    for pair in clip.windows(2) {
        let flow = est.estimate(&pair[0], &pair[1])?;
        let warped = warp_tensor(pair[0].tensor(), &flow)?;
        s += pixel_loss(pair[1].tensor(), &warped)?;
    }
    Ok(s / (clip.len() - 1) as f64)
}

pub fn pixel_loss_var(g: &mut Graph, gen: Var, gt: Var) -> Result<Var> {
    g.mse(gen, gt)
}

pub fn pingpong_loss_var(g: &mut Graph, forward: &[Var], backward: &[Var]) -> Result<Var> {
    if forward.len() != backward.len() || forward.is_empty() {
        return Err(Error::invalid("ping-pong loss needs equal, non-empty sequences"));
    }
    let n = forward.len() as f64;
    let terms = forward
        .iter()
        .zip(backward)
        .map(|(&f, &b)| Ok((g.mse(f, b)?, 1.0 / n)))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&terms)
}

/// Discriminator loss from logits, as a `[1]` node.
pub fn gan_loss_d_var(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let nr = g.scale(real, -1.0);
    let a = g.softplus(nr);
    let b = g.softplus(fake);
    let s = g.add(a, b)?;
    Ok(g.mean(s))
}

pub fn gan_loss_g_var(g: &mut Graph, fake: Var, form: GanForm) -> Var {
    let z = match form {
        GanForm::NonSaturating => g.scale(fake, -1.0),
        GanForm::Minimax => fake,
    };
    let sp = g.softplus(z);
    let out = match form {
        GanForm::NonSaturating => sp,
        GanForm::Minimax => g.scale(sp, -1.0),
    };
    g.mean(out)
}

pub fn feature_loss_var(g: &mut Graph, feats_g: &[Var], feats_b: &[Var], weights: &[f64]) -> Result<Var> {
    if feats_g.len() != feats_b.len() || feats_g.len() != weights.len() || weights.is_empty() {
        return Err(Error::invalid("feature loss needs matching, non-empty map lists"));
    }
    let terms = feats_g
        .iter()
        .zip(feats_b)
        .zip(weights)
        .map(|((&a, &b), &w)| Ok((g.cosine_distance(a, b, COSINE_EPS)?, w)))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&terms)
}

/// Warping objective over graph frames; differentiable in the learned
/// flow network's parameters and in the frames.
pub fn warping_loss_var(g: &mut Graph, frames: &[Var], est: &FlowEstimator) -> Result<Var> {
    if frames.len() < 2 {
        return Err(Error::ClipTooShort { what: "warping loss", min: 2, got: frames.len() });
    }
    let n = (frames.len() - 1) as f64;
    let mut terms = Vec::with_capacity(frames.len() - 1);
    for pair in frames.windows(2) {
        let flow = est.estimate_var(g, pair[0], pair[1])?;
        let warped = g.warp(pair[0], flow)?;
        terms.push((g.mse(pair[1], warped)?, 1.0 / n));
    }
    g.weighted_sum(&terms)
}
