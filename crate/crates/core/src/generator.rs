//! Recurrent back-projection generator.
//!
//! For a target frame `a_t` and its neighbours, the target features seed an
//! LR state `L_0`. Each neighbour `k` contributes features `M_k` computed
//! from `[a_t, a_k, flow_k]`; a projection step turns `(L_{k-1}, M_k)` into
//! an HR map `H_k` (encoder) and the next state `L_k` (decoder). All `H_k`
//! are concatenated and reconstructed into an RGB residual that is added to
//! the bicubic enlargement of `a_t`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowEstimator, FlowField};
use crate::frame::{Frame, VideoClip};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvAct, Down4, GroupId, Init, PRelu, ParamStore, ResBlock, Up4};
use crate::resample::reflect_index;
use crate::SCALE;

pub const GENERATOR_GROUP: GroupId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_neighbors: usize,
    pub n_residual_blocks: usize,
    pub scale: usize,
    pub bicubic_skip: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 32,
            n_neighbors: 3,
            n_residual_blocks: 3,
            scale: SCALE,
            bicubic_skip: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale != SCALE {
            return Err(Error::Config(format!("generator scale must be {SCALE}, got {}", self.scale)));
        }
        if self.n_neighbors == 0 {
            return Err(Error::Config("n_neighbors must be at least 1".into()));
        }
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "base_channels must be at least 8, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }
}

/// Graph handles for a forward pass in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionState {
    pub l: Var,
    pub h_list: Vec<Var>,
}

/// Neighbour frames of one target, each with its flow onto the target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborPack {
    entries: Vec<(Frame, FlowField)>,
}

impl NeighborPack {
    pub fn new(entries: Vec<(Frame, FlowField)>) -> Result<Self> {
        if let Some((f0, _)) = entries.first() {
            let dims = f0.dims();
            if entries.iter().any(|(f, fl)| f.dims() != dims || fl.dims() != dims) {
                return Err(Error::invalid("neighbour frames and flows must share dims"));
            }
        }
        Ok(NeighborPack { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Frame, FlowField)] {
        &self.entries
    }
}

/// Neighbour indices of target `t` in a clip of `len` frames: `t-1, t+1,
/// t-2, t+2, ...`, reflected at the clip ends (duplicates possible).
pub fn neighbor_indices(t: usize, len: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let d = (i / 2 + 1) as isize;
            let off = if i % 2 == 0 { -d } else { d };
            reflect_index(t as isize + off, len)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    feat_target: ConvAct,
    feat_neighbor: ConvAct,
    sisr_up: Up4,
    sisr_down: Down4,
    sisr_up_err: Up4,
    misr_up: Up4,
    res: Vec<ResBlock>,
    dec_down: Down4,
    dec_res: ResBlock,
    recon: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(GENERATOR_GROUP);
        let c = config.base_channels;
        let conv_act = |p: &mut ParamStore, name: &str, cin: usize, rng: &mut ChaCha8Rng| ConvAct {
            conv: Conv2d::same3(p, name, cin, c, Init::PRELU, rng),
            act: PRelu::new(p, &format!("{name}.act"), c),
        };
        let feat_target = conv_act(&mut p, "feat_target", 3, &mut rng);
        let feat_neighbor = conv_act(&mut p, "feat_neighbor", 8, &mut rng);
        let sisr_up = Up4::new(&mut p, "sisr.up", c, &mut rng);
        let sisr_down = Down4::new(&mut p, "sisr.down", c, &mut rng);
        let sisr_up_err = Up4::new(&mut p, "sisr.up_err", c, &mut rng);
        let misr_up = Up4::new(&mut p, "misr.up", c, &mut rng);
        let res = (0..config.n_residual_blocks)
            .map(|i| ResBlock::new(&mut p, &format!("res.{i}"), c, &mut rng))
            .collect();
        let dec_down = Down4::new(&mut p, "dec.down", c, &mut rng);
        let dec_res = ResBlock::new(&mut p, "dec.res", c, &mut rng);
        let recon = Conv2d::same3(
            &mut p,
            "recon",
            c * config.n_neighbors,
            3,
            Init::He { slope: 1.0, gain: 0.1 },
            &mut rng,
        );
        Ok(Generator {
            config,
            params: p,
            feat_target,
            feat_neighbor,
            sisr_up,
            sisr_down,
            sisr_up_err,
            misr_up,
            res,
            dec_down,
            dec_res,
            recon,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Zeroes the reconstruction convolution, making the generator output
    /// the bicubic enlargement when the skip is on.
    pub fn zero_reconstruction(&mut self) {
        self.recon.zero(&mut self.params);
    }

    /// Human-readable summary with per-module parameter counts.
    pub fn describe(&self) -> String {
        let mut groups: Vec<(&str, usize)> = Vec::new();
        for (_, name, t) in self.params.iter() {
            let module = name.split('.').next().unwrap_or(name);
            match groups.iter_mut().find(|(m, _)| *m == module) {
                Some((_, n)) => *n += t.numel(),
                None => groups.push((module, t.numel())),
            }
        }
        let c = &self.config;
        let mut s = format!(
            "generator: channels={} neighbors={} residual_blocks={} scale={} bicubic_skip={}\n",
            c.base_channels, c.n_neighbors, c.n_residual_blocks, c.scale, c.bicubic_skip
        );
        for (m, n) in groups {
            let _ = writeln!(s, "  {m:<14} {n:>10}");
        }
        let _ = write!(s, "  {:<14} {:>10}", "total", self.parameter_count());
        s
    }

    pub fn extract_target_features(&self, g: &mut Graph, a_t: Var) -> Result<Var> {
        self.feat_target.forward(g, &self.params, a_t)
    }

    pub fn extract_neighbor_features(&self, g: &mut Graph, a_t: Var, neighbor: Var, flow: Var) -> Result<Var> {
        let (at, nb, fl) = (g.value(a_t).shape(), g.value(neighbor).shape(), g.value(flow).shape());
        if at != nb || fl.len() != 3 || fl[0] != 2 || fl[1..] != at[1..] {
            return Err(Error::invalid(format!(
                "neighbour features: target {at:?}, neighbour {nb:?}, flow {fl:?}"
            )));
        }
        let x = g.concat(&[a_t, neighbor, flow])?;
        self.feat_neighbor.forward(g, &self.params, x)
    }

    /// Encoder: `(L_{k-1}, M_k) -> H_k` at 4x resolution.
    pub fn project_encode(&self, g: &mut Graph, l_prev: Var, m: Var) -> Result<Var> {
        if g.value(l_prev).shape() != g.value(m).shape() {
            return Err(Error::invalid(format!(
                "projection inputs {:?} vs {:?}",
                g.value(l_prev).shape(),
                g.value(m).shape()
            )));
        }
        let p = &self.params;
        // Single-image path with one back-projection of its own LR error.
        let h0 = self.sisr_up.forward(g, p, l_prev)?;
        let l0 = self.sisr_down.forward(g, p, h0)?;
        let e = g.sub(l0, l_prev)?;
        let h1 = self.sisr_up_err.forward(g, p, e)?;
        let h_sisr = g.add(h0, h1)?;
        let h_misr = self.misr_up.forward(g, p, m)?;
        let mut r = g.sub(h_misr, h_sisr)?;
        for block in &self.res {
            r = block.forward(g, p, r)?;
        }
        g.add(h_sisr, r)
    }

    /// Decoder: `H_k -> L_k` at 1/4 resolution.
    pub fn project_decode(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let s = g.value(h).shape();
        if s.len() != 3 || !s[1].is_multiple_of(SCALE) || !s[2].is_multiple_of(SCALE) {
            return Err(Error::invalid(format!("decoder input {s:?} not divisible by {SCALE}")));
        }
        let d = self.dec_down.forward(g, &self.params, h)?;
        self.dec_res.forward(g, &self.params, d)
    }

    /// RGB residual from the concatenated HR maps.
    pub fn reconstruct(&self, g: &mut Graph, h_list: &[Var]) -> Result<Var> {
        if h_list.is_empty() {
            return Err(Error::invalid("reconstruct needs at least one HR map"));
        }
        if h_list.len() != self.config.n_neighbors {
            return Err(Error::invalid(format!(
                "reconstruct expects {} HR maps, got {}",
                self.config.n_neighbors,
                h_list.len()
            )));
        }
        let x = g.concat(h_list)?;
        self.recon.forward(g, &self.params, x)
    }

    /// Runs feature extraction and every projection step.
    pub fn project_all(&self, g: &mut Graph, a_t: Var, pack: &[(Var, Var)]) -> Result<ProjectionState> {
        if pack.len() != self.config.n_neighbors {
            return Err(Error::invalid(format!(
                "expected {} neighbours, got {}",
                self.config.n_neighbors,
                pack.len()
            )));
        }
        let mut state = ProjectionState {
            l: self.extract_target_features(g, a_t)?,
            h_list: Vec::with_capacity(pack.len()),
        };
        for (k, &(nb, flow)) in pack.iter().enumerate() {
            let m = self.extract_neighbor_features(g, a_t, nb, flow)?;
            let h = self.project_encode(g, state.l, m)?;
            state.h_list.push(h);
            if k + 1 < pack.len() {
                state.l = self.project_decode(g, h)?;
            }
        }
        Ok(state)
    }

    /// Differentiable, unclamped SR output for one target.
    pub fn forward(&self, g: &mut Graph, a_t: Var, pack: &[(Var, Var)]) -> Result<Var> {
        let state = self.project_all(g, a_t, pack)?;
        let res = self.reconstruct(g, &state.h_list)?;
        if self.config.bicubic_skip {
            let up = g.bicubic_upsample(a_t, SCALE)?;
            g.add(up, res)
        } else {
            Ok(res)
        }
    }

    /// Inference for one target; the output is clamped to `[0, 1]`.
    pub fn generate(&self, a_t: &Frame, pack: &NeighborPack) -> Result<Frame> {
        if pack.len() != self.config.n_neighbors {
            return Err(Error::invalid(format!(
                "expected {} neighbours, got {}",
                self.config.n_neighbors,
                pack.len()
            )));
        }
        if pack.entries().iter().any(|(f, _)| f.dims() != a_t.dims()) {
            return Err(Error::invalid("neighbour dims differ from target"));
        }
        let mut g = Graph::new();
        g.freeze_group(GENERATOR_GROUP);
        let t = g.input(a_t.tensor().clone());
        let vars: Vec<(Var, Var)> = pack
            .entries()
            .iter()
            .map(|(f, fl)| (g.input(f.tensor().clone()), g.input(fl.tensor().clone())))
            .collect();
        let out = self.forward(&mut g, t, &vars)?;
        Frame::from_tensor_clamped(g.value(out).clone())
    }

    /// Builds the neighbour pack of target `t`, flows from `flow`.
    pub fn pack_for(&self, clip: &VideoClip, t: usize, flow: &FlowEstimator) -> Result<NeighborPack> {
        let frames = clip.frames();
        let target = &frames[t];
        let entries = neighbor_indices(t, frames.len(), self.config.n_neighbors)
            .into_iter()
            .map(|i| Ok((frames[i].clone(), flow.estimate(&frames[i], target)?)))
            .collect::<Result<Vec<_>>>()?;
        NeighborPack::new(entries)
    }

    /// Super-resolves every frame of an LR clip.
    pub fn generate_sequence(&self, clip: &VideoClip, flow: &FlowEstimator) -> Result<VideoClip> {
        let out = (0..clip.len())
            .map(|t| {
                let pack = self.pack_for(clip, t, flow)?;
                self.generate(&clip.frames()[t], &pack)
            })
            .collect::<Result<Vec<_>>>()?;
        VideoClip::new(clip.scene_id(), out)
    }
}
