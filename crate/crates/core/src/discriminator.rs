//! Spatio-temporal triplet discriminator conditioned on the LR input.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::graph::{sigmoid, Graph, Var};
use crate::nn::{Conv2d, GroupId, Init, ParamStore};
use crate::tensor::Tensor;

pub const DISCRIMINATOR_GROUP: GroupId = 3;

/// Bounds applied to the sigmoid so that scores stay strictly inside (0, 1).
pub const SCORE_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Appends the warped previous/next frames (9 extra channels).
    pub include_warped_triplet: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            widths: alloc::vec![32, 64, 64, 128],
            leaky_slope: 0.2,
            include_warped_triplet: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn input_channels(&self) -> usize {
        if self.include_warped_triplet {
            27
        } else {
            18
        }
    }
}

/// Three consecutive frames of equal dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet(pub [Frame; 3]);

impl Triplet {
    pub fn new(prev: Frame, cur: Frame, next: Frame) -> Result<Self> {
        if prev.dims() != cur.dims() || next.dims() != cur.dims() {
            return Err(Error::invalid(format!(
                "triplet dims {:?} {:?} {:?}",
                prev.dims(),
                cur.dims(),
                next.dims()
            )));
        }
        Ok(Triplet([prev, cur, next]))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0[1].dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    pub score: f64,
    pub logit: f64,
    pub features: Vec<Tensor>,
}

/// Graph handles of a discriminator pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscVars {
    pub logit: Var,
    pub features: Vec<Var>,
}

/// `[f_{t-1}, f_t, f_{t+1}, u_{t-1}, u_t, u_{t+1}]` along channels.
pub fn assemble_input(triplet: &Triplet, lr_up: &Triplet) -> Result<Tensor> {
    if triplet.dims() != lr_up.dims() {
        return Err(Error::invalid(format!(
            "triplet {:?} vs conditioning {:?}",
            triplet.dims(),
            lr_up.dims()
        )));
    }
    let parts: Vec<&Tensor> = triplet.0.iter().chain(&lr_up.0).map(Frame::tensor).collect();
    Tensor::concat_channels(&parts)
}

/// [`assemble_input`] followed by the 9 warped-triplet channels.
pub fn assemble_input_warped(triplet: &Triplet, lr_up: &Triplet, warped: &Triplet) -> Result<Tensor> {
    let base = assemble_input(triplet, lr_up)?;
    if warped.dims() != triplet.dims() {
        return Err(Error::invalid("warped triplet dims differ"));
    }
    let mut parts: Vec<&Tensor> = alloc::vec![&base];
    parts.extend(warped.0.iter().map(Frame::tensor));
    Tensor::concat_channels(&parts)
}

pub fn score_from_logit(z: f64) -> f64 {
    sigmoid(z).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    stages: Vec<Conv2d>,
    dense: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Config("discriminator widths must be non-empty and positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(DISCRIMINATOR_GROUP);
        let init = Init::He { slope: config.leaky_slope, gain: 1.0 };
        let mut cin = config.input_channels();
        let mut stages = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(Conv2d::new(&mut params, &format!("disc.{i}"), cin, w, 3, 2, 1, init, &mut rng));
            cin = w;
        }
        let dense = Conv2d::new(&mut params, "disc.dense", cin, 1, 1, 1, 0, Init::LINEAR, &mut rng);
        Ok(Discriminator { config, params, stages, dense })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<DiscVars> {
        let s = g.value(input).shape();
        if s.len() != 3 || s[0] != self.config.input_channels() {
            return Err(Error::invalid(format!(
                "discriminator expects {} channels, got shape {s:?}",
                self.config.input_channels()
            )));
        }
        let mut x = input;
        let mut features = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let y = st.forward(g, &self.params, x)?;
            x = g.leaky_relu(y, self.config.leaky_slope);
            features.push(x);
        }
        let pooled = g.global_avg_pool(x)?;
        let logit = self.dense.forward(g, &self.params, pooled)?;
        Ok(DiscVars { logit, features })
    }

    /// Concatenates six `[3, h, w]` nodes and runs the network.
    pub fn forward_triplets(&self, g: &mut Graph, frames: [Var; 3], lr_up: [Var; 3]) -> Result<DiscVars> {
        let x = g.concat(&[frames[0], frames[1], frames[2], lr_up[0], lr_up[1], lr_up[2]])?;
        self.forward(g, x)
    }

    pub fn discriminate(&self, input: &Tensor) -> Result<DiscOutput> {
        let mut g = Graph::new();
        g.freeze_group(DISCRIMINATOR_GROUP);
        let x = g.input(input.clone());
        let out = self.forward(&mut g, x)?;
        let logit = g.scalar(out.logit);
        Ok(DiscOutput {
            score: score_from_logit(logit),
            logit,
            features: out.features.iter().map(|&f| g.value(f).clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> Frame {
        let mut s = seed.wrapping_add(77);
        Frame::from_fn(h, w, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    fn trip(h: usize, w: usize, seed: u64) -> Triplet {
        Triplet::new(noise(h, w, seed), noise(h, w, seed + 1), noise(h, w, seed + 2)).unwrap()
    }

    #[test]
    fn assemble_layout() {
        let t = trip(8, 8, 0);
        let u = trip(8, 8, 10);
        let x = assemble_input(&t, &u).unwrap();
        assert_eq!(x.shape(), &[18, 8, 8]);
        assert_eq!(&x.channel_slice(0, 3).unwrap(), t.0[0].tensor());
        assert_eq!(&x.channel_slice(12, 3).unwrap(), u.0[1].tensor());
        assert!(assemble_input(&t, &trip(8, 4, 0)).is_err());
        let w = assemble_input_warped(&t, &u, &trip(8, 8, 20)).unwrap();
        assert_eq!(w.shape(), &[27, 8, 8]);
    }

    #[test]
    fn output_range_and_feature_dims() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 0).unwrap();
        let x = assemble_input(&trip(17, 12, 0), &trip(17, 12, 3)).unwrap();
        let out = d.discriminate(&x).unwrap();
        assert!(out.score > 0.0 && out.score < 1.0);
        let dims: Vec<_> = out.features.iter().map(|f| (f.shape()[1], f.shape()[2])).collect();
        assert_eq!(dims, [(9, 6), (5, 3), (3, 2), (2, 1)]);
        assert!(d.discriminate(&Tensor::zeros(&[9, 8, 8])).is_err());
    }

    #[test]
    fn score_never_touches_bounds() {
        assert!(score_from_logit(1e6) < 1.0);
        assert!(score_from_logit(-1e6) > 0.0);
    }
}
