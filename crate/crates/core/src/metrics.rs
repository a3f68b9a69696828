//! Quality metrics and the evaluation protocol.
//!
//! Frames are `[0, 1]` internally and scaled to `[0, 255]` where a metric is
//! defined on 8-bit ranges. Spatial metrics (PSNR, SSIM, LPIPS) and the
//! temporal one (tOF) are computed on protocol-cropped frames over the
//! retained frame indices.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::flow::{luma, ClassicalFlow};
use crate::frame::{Frame, VideoClip};
use crate::graph::Graph;
use crate::nn::{Conv2d, GroupId, Init, ParamStore};
use crate::resample::gaussian_kernel_1d;
use crate::tensor::Tensor;
use crate::SCALE;

pub const LPIPS_GROUP: GroupId = 4;
pub const REPORT_SCHEMA: &str = "vsr-metrics/1";
/// Tables list LPIPS multiplied by this factor.
pub const LPIPS_TABLE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub border_px: usize,
    /// Interpret `border_px` at LR scale instead of the result scale.
    pub border_at_lr: bool,
    /// The LR-equivalent crop is shrunk to a multiple of this.
    pub divisor: usize,
    pub spatial_skip: (usize, usize),
    pub temporal_skip: (usize, usize),
    pub scale: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            border_px: 8,
            border_at_lr: false,
            divisor: 8,
            spatial_skip: (2, 2),
            temporal_skip: (3, 2),
            scale: SCALE,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.divisor == 0 || self.scale == 0 {
            return Err(Error::Config("protocol divisor and scale must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameScale {
    Hr,
    Lr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSelection {
    Spatial,
    Temporal,
}

/// Crop window `(offset, length)` along one axis of `len` pixels.
fn protocol_axis(len: usize, border: usize, unit: usize) -> Option<(usize, usize)> {
    let inner = len.checked_sub(2 * border)?;
    let target = inner / unit * unit;
    if target == 0 {
        return None;
    }
    let excess = inner - target;
    Some((border + excess / 2, target))
}

/// Border crop then centred shrink of a result-scale frame.
pub fn protocol_crop(frame: &Frame, cfg: &ProtocolConfig) -> Result<Frame> {
    protocol_crop_at(frame, cfg, FrameScale::Hr)
}

pub fn protocol_crop_at(frame: &Frame, cfg: &ProtocolConfig, at: FrameScale) -> Result<Frame> {
    cfg.validate()?;
    let (border, unit) = match (at, cfg.border_at_lr) {
        (FrameScale::Hr, false) => (cfg.border_px, cfg.divisor * cfg.scale),
        (FrameScale::Hr, true) => (cfg.border_px * cfg.scale, cfg.divisor * cfg.scale),
        (FrameScale::Lr, false) => (cfg.border_px.div_ceil(cfg.scale), cfg.divisor),
        (FrameScale::Lr, true) => (cfg.border_px, cfg.divisor),
    };
    let (h, w) = frame.dims();
    match (protocol_axis(h, border, unit), protocol_axis(w, border, unit)) {
        (Some((y0, ch)), Some((x0, cw))) => frame.crop(y0, x0, ch, cw),
        _ => Err(Error::invalid(format!(
            "protocol crop of a {h}x{w} frame is empty (border {border}, unit {unit})"
        ))),
    }
}

/// Retained 0-based frame indices of an `n`-frame clip.
pub fn select_frames(n: usize, kind: FrameSelection, cfg: &ProtocolConfig) -> Result<Vec<usize>> {
    let (first, last) = match kind {
        FrameSelection::Spatial => cfg.spatial_skip,
        FrameSelection::Temporal => cfg.temporal_skip,
    };
    let min = first + last + 1;
    if n < min {
        return Err(Error::ClipTooShort {
            what: match kind {
                FrameSelection::Spatial => "spatial metrics",
                FrameSelection::Temporal => "temporal metrics",
            },
            min,
            got: n,
        });
    }
    Ok((first..n - last).collect())
}

fn check_dims(a: &Frame, b: &Frame, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over RGB at `[0, 255]`; identical
/// frames give `f64::INFINITY`.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_dims(a, b, "psnr")?;
    let n = a.tensor().numel() as f64;
    let mse = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| {
            let d = 255.0 * (x - y);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(255.0 * 255.0 / mse))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Separable weighted sum over every fully contained window.
fn valid_filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = alloc::vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = alloc::vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the BT.601 luma at `[0, 255]`.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_dims(a, b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW)?;
    let ya: Vec<f64> = luma(a.tensor()).data().iter().map(|v| v * 255.0).collect();
    let yb: Vec<f64> = luma(b.tensor()).data().iter().map(|v| v * 255.0).collect();
    let aa: Vec<f64> = ya.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = yb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = ya.iter().zip(&yb).map(|(x, y)| x * y).collect();
    let [ma, mb, saa, sbb, sab] = [&ya, &yb, &aa, &bb, &ab].map(|p| valid_filter(p, h, w, &k));
    let mut s = 0.0;
    for i in 0..ma.len() {
        let (mx, my) = (ma[i], mb[i]);
        let vx = saa[i] - mx * mx;
        let vy = sbb[i] - my * my;
        let cxy = sab[i] - mx * my;
        s += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(s / ma.len() as f64)
}

/// Feature extractor behind the perceptual distance.
pub trait FeatureBackbone {
    fn name(&self) -> String;
    fn features(&self, frame: &Frame) -> Result<Vec<Tensor>>;
}

/// Frozen random convolutional pyramid: five stride-2 3x3 stages with
/// ReLU, fed with `2x - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPyramid {
    seed: u64,
    params: ParamStore,
    stages: Vec<Conv2d>,
}

impl RandomPyramid {
    pub const WIDTHS: [usize; 5] = [16, 32, 48, 64, 64];
    pub const DEFAULT_SEED: u64 = 0x1f2e_3d4c;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(LPIPS_GROUP);
        let mut cin = 3;
        let stages = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(
                    &mut params,
                    &format!("lpips.{i}"),
                    cin,
                    w,
                    3,
                    2,
                    1,
                    Init::He { slope: 0.0, gain: 1.0 },
                    &mut rng,
                );
                cin = w;
                c
            })
            .collect();
        RandomPyramid { seed, params, stages }
    }

    /// Same architecture with externally supplied weights.
    pub fn with_weights(named: &[(String, Tensor)]) -> Result<Self> {
        let mut p = RandomPyramid::new(Self::DEFAULT_SEED);
        p.params.load_named(named)?;
        p.seed = 0;
        Ok(p)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl Default for RandomPyramid {
    fn default() -> Self {
        RandomPyramid::new(Self::DEFAULT_SEED)
    }
}

impl FeatureBackbone for RandomPyramid {
    fn name(&self) -> String {
        if self.seed == 0 {
            "pyramid-external".to_string()
        } else {
            format!("random-pyramid-seed-{}", self.seed)
        }
    }

    fn features(&self, frame: &Frame) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        g.freeze_group(LPIPS_GROUP);
        let mut x = g.input(frame.tensor().map(|v| 2.0 * v - 1.0));
        let mut out = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let y = st.forward(&mut g, &self.params, x)?;
            x = g.leaky_relu(y, 0.0);
            out.push(g.value(x).clone());
        }
        Ok(out)
    }
}

/// Scales each pixel's channel vector to unit length.
fn unit_normalize(t: &Tensor) -> Tensor {
    let (c, h, w) = t.chw();
    let mut out = t.clone();
    let hw = h * w;
    for p in 0..hw {
        let n = libm::sqrt((0..c).map(|ci| { let v = t.data()[ci * hw + p]; v * v }).sum::<f64>());
        let d = n + 1e-10;
        for ci in 0..c {
            out.data_mut()[ci * hw + p] /= d;
        }
    }
    out
}

/// Perceptual distance: per stage, the mean over pixels of the squared
/// difference of unit-normalised features, summed over stages.
pub fn lpips(a: &Frame, b: &Frame, backbone: &dyn FeatureBackbone) -> Result<f64> {
    check_dims(a, b, "lpips")?;
    if a == b {
        return Ok(0.0);
    }
    let fa = backbone.features(a)?;
    let fb = backbone.features(b)?;
    let mut s = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (nx, ny) = (unit_normalize(x), unit_normalize(y));
        let (_, h, w) = x.chw();
        let sq: f64 = nx.data().iter().zip(ny.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        s += sq / (h * w) as f64;
    }
    Ok(s)
}

/// Mean per-pixel L1 flow difference `|dx_b - dx_g| + |dy_b - dy_g|` for
/// the step into frame `t`.
pub fn tof_at(gt: &VideoClip, gen: &VideoClip, t: usize, flow: &ClassicalFlow) -> Result<f64> {
    if t == 0 || t >= gt.len() {
        return Err(Error::invalid(format!("tOF step {t} outside 1..{}", gt.len())));
    }
    let fb = flow.estimate(&gt.frames()[t - 1], &gt.frames()[t])?;
    let fg = flow.estimate(&gen.frames()[t - 1], &gen.frames()[t])?;
    fb.mean_l1_distance(&fg)
}

fn check_clips(gt: &VideoClip, gen: &VideoClip) -> Result<()> {
    if gt.len() != gen.len() || gt.dims() != gen.dims() {
        return Err(Error::invalid(format!(
            "clip {}: {} frames {:?} vs {} frames {:?}",
            gt.scene_id(),
            gt.len(),
            gt.dims(),
            gen.len(),
            gen.dims()
        )));
    }
    Ok(())
}

/// tOF averaged over every step `t = 1 .. n-1`.
pub fn tof(gt: &VideoClip, gen: &VideoClip, flow: &ClassicalFlow) -> Result<f64> {
    check_clips(gt, gen)?;
    if gt.len() < 2 {
        return Err(Error::ClipTooShort { what: "tOF", min: 2, got: gt.len() });
    }
    let mut s = 0.0;
    for t in 1..gt.len() {
        s += tof_at(gt, gen, t, flow)?;
    }
    Ok(s / (gt.len() - 1) as f64)
}

/// A PSNR value that serialises `+inf` as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() && self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Db;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> core::result::Result<Db, E> {
                Ok(Db(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> core::result::Result<Db, E> {
                Ok(Db(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> core::result::Result<Db, E> {
                Ok(Db(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> core::result::Result<Db, E> {
                match v {
                    "inf" => Ok(Db(f64::INFINITY)),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

impl fmt::Display for Db {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{:.2}", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub psnr: Db,
    pub ssim: f64,
    /// Raw perceptual distance (not multiplied).
    pub lpips: f64,
    /// Only for frames retained by the temporal selection.
    pub tof: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean over frames with finite PSNR; `inf` when none is finite.
    pub psnr: Db,
    pub psnr_frames: usize,
    pub psnr_infinite_frames: usize,
    pub ssim: f64,
    /// Multiplied by [`LPIPS_TABLE_SCALE`].
    pub lpips: f64,
    pub lpips_raw: f64,
    pub tof: f64,
    pub spatial_frames: usize,
    pub temporal_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene_id: String,
    pub spatial_indices: Vec<usize>,
    pub temporal_indices: Vec<usize>,
    pub frames: Vec<FrameMetrics>,
    pub mean: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: String,
    pub model: String,
    pub protocol: ProtocolConfig,
    pub tof_norm: String,
    pub lpips_backbone: String,
    pub lpips_table_scale: f64,
    pub scenes: Vec<SceneReport>,
    /// Frame-weighted over all scenes.
    pub overall: Aggregate,
}

fn aggregate<'a>(frames: impl Iterator<Item = &'a FrameMetrics>) -> Aggregate {
    let (mut ps, mut pn, mut pinf) = (0.0, 0usize, 0usize);
    let (mut ss, mut ls, mut n) = (0.0, 0.0, 0usize);
    let (mut ts, mut tn) = (0.0, 0usize);
    for f in frames {
        if f.psnr.0.is_finite() {
            ps += f.psnr.0;
            pn += 1;
        } else {
            pinf += 1;
        }
        ss += f.ssim;
        ls += f.lpips;
        n += 1;
        if let Some(t) = f.tof {
            ts += t;
            tn += 1;
        }
    }
    let mean = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    Aggregate {
        psnr: Db(if pn == 0 { f64::INFINITY } else { ps / pn as f64 }),
        psnr_frames: pn,
        psnr_infinite_frames: pinf,
        ssim: mean(ss, n),
        lpips: LPIPS_TABLE_SCALE * mean(ls, n),
        lpips_raw: mean(ls, n),
        tof: mean(ts, tn),
        spatial_frames: n,
        temporal_frames: tn,
    }
}

/// What [`evaluate`] needs besides the clips.
pub struct EvalSettings<'a> {
    pub protocol: ProtocolConfig,
    pub backbone: &'a dyn FeatureBackbone,
    pub flow: ClassicalFlow,
    pub model: String,
}

pub fn evaluate_scene(gen: &VideoClip, gt: &VideoClip, s: &EvalSettings<'_>) -> Result<SceneReport> {
    check_clips(gt, gen)?;
    let spatial = select_frames(gt.len(), FrameSelection::Spatial, &s.protocol)?;
    let temporal = select_frames(gt.len(), FrameSelection::Temporal, &s.protocol)?;
    let needed: BTreeSet<usize> = spatial
        .iter()
        .copied()
        .chain(temporal.iter().flat_map(|&t| [t - 1, t]))
        .collect();
    let crop = |c: &VideoClip| -> Result<Vec<Option<Frame>>> {
        (0..c.len())
            .map(|i| {
                if needed.contains(&i) {
                    protocol_crop(&c.frames()[i], &s.protocol).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    };
    let (cg, cb) = (crop(gen)?, crop(gt)?);
    let temporal_set: BTreeSet<usize> = temporal.iter().copied().collect();
    let mut frames = Vec::with_capacity(spatial.len());
    for &i in &spatial {
        let (g, b) = (cg[i].as_ref().unwrap(), cb[i].as_ref().unwrap());
        let tof = if temporal_set.contains(&i) {
            let fb = s.flow.estimate(cb[i - 1].as_ref().unwrap(), b)?;
            let fg = s.flow.estimate(cg[i - 1].as_ref().unwrap(), g)?;
            Some(fb.mean_l1_distance(&fg)?)
        } else {
            None
        };
        frames.push(FrameMetrics {
            index: i,
            psnr: Db(psnr(g, b)?),
            ssim: ssim(g, b)?,
            lpips: lpips(g, b, s.backbone)?,
            tof,
        });
    }
    let mean = aggregate(frames.iter());
    Ok(SceneReport {
        scene_id: gt.scene_id().to_string(),
        spatial_indices: spatial,
        temporal_indices: temporal,
        frames,
        mean,
    })
}

/// Pairs clips by scene id and evaluates every scene.
pub fn evaluate(gen: &[VideoClip], gt: &[VideoClip], s: &EvalSettings<'_>) -> Result<MetricReport> {
    if gt.is_empty() {
        return Err(Error::invalid("no scenes to evaluate"));
    }
    let gen_ids: BTreeSet<&str> = gen.iter().map(VideoClip::scene_id).collect();
    let gt_ids: BTreeSet<&str> = gt.iter().map(VideoClip::scene_id).collect();
    if gen_ids != gt_ids || gen_ids.len() != gen.len() || gt_ids.len() != gt.len() {
        let missing: Vec<&str> = gt_ids.difference(&gen_ids).copied().collect();
        let extra: Vec<&str> = gen_ids.difference(&gt_ids).copied().collect();
        return Err(Error::invalid(format!(
            "scene sets differ: missing from generated [{}], not in ground truth [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let mut ordered: Vec<&VideoClip> = gt.iter().collect();
    ordered.sort_by(|a, b| a.scene_id().cmp(b.scene_id()));
    let scenes = ordered
        .into_iter()
        .map(|b| {
            let g = gen.iter().find(|g| g.scene_id() == b.scene_id()).unwrap();
            evaluate_scene(g, b, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = aggregate(scenes.iter().flat_map(|sc| sc.frames.iter()));
    Ok(MetricReport {
        schema: REPORT_SCHEMA.to_string(),
        model: s.model.clone(),
        protocol: s.protocol,
        tof_norm: "mean-l1".to_string(),
        lpips_backbone: s.backbone.name(),
        lpips_table_scale: LPIPS_TABLE_SCALE,
        scenes,
        overall,
    })
}
