//! Motion estimation and backward warping.
//!
//! A [`FlowField`] lives on the target (destination) grid and points into
//! the source frame: `warp(src, flow)(y, x) = src(y + dy, x + dx)`, sampled
//! bilinearly with coordinates clamped to the frame.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::frame::Frame;
use crate::graph::{warp_forward, Graph, Var};
use crate::nn::{Conv2d, GroupId, Init, ParamStore};
use crate::resample::{apply_separable, clamp_index, gaussian_kernel_1d, Taps};
use crate::tensor::Tensor;

pub const FLOW_GROUP: GroupId = 2;

/// Per-pixel displacement `[2, h, w]`: channel 0 is dx, channel 1 is dy.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        if !t.is_chw() || t.shape()[0] != 2 {
            return Err(Error::shape(format!("flow must be [2, h, w], got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::invalid("flow contains non-finite values"));
        }
        Ok(FlowField(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(&[2, h, w]))
    }

    pub fn constant(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        FlowField(Tensor::from_fn_chw(2, h, w, |c, _, _| if c == 0 { dx } else { dy }))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dx(&self, y: usize, x: usize) -> f64 {
        self.0.at(0, y, x)
    }

    pub fn dy(&self, y: usize, x: usize) -> f64 {
        self.0.at(1, y, x)
    }

    /// Mean displacement magnitude.
    pub fn mean_magnitude(&self) -> f64 {
        let (h, w) = self.dims();
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += libm::hypot(self.dx(y, x), self.dy(y, x));
            }
        }
        s / (h * w) as f64
    }

    /// Mean per-pixel L1 distance `|dx1 - dx2| + |dy1 - dy2|`.
    pub fn mean_l1_distance(&self, other: &FlowField) -> Result<f64> {
        ensure_same_shape("flow distance", self.0.shape(), other.0.shape())?;
        let (h, w) = self.dims();
        let s: f64 = self
            .0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(a, b)| libm::fabs(a - b))
            .sum();
        Ok(s / (h * w) as f64)
    }
}

/// Warps any `[c, h, w]` raster along the flow.
pub fn warp_tensor(t: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (c, h, w) = t.chw();
    if flow.dims() != (h, w) {
        return Err(Error::shape(format!("flow {:?} vs frame {h}x{w}", flow.dims())));
    }
    Ok(warp_forward(t, flow.tensor(), c, h, w))
}

pub fn warp(frame: &Frame, flow: &FlowField) -> Result<Frame> {
    // A convex combination of in-range samples stays in range.
    Frame::from_tensor_clamped(warp_tensor(frame.tensor(), flow)?)
}

/// ITU-R BT.601 luma of an RGB raster, same value range as the input.
pub fn luma(t: &Tensor) -> Tensor {
    let (_, h, w) = t.chw();
    Tensor::from_fn_chw(1, h, w, |_, y, x| {
        0.299 * t.at(0, y, x) + 0.587 * t.at(1, y, x) + 0.114 * t.at(2, y, x)
    })
}

/// Dense coarse-to-fine Lucas-Kanade on luma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalFlow {
    pub max_levels: usize,
    /// Coarsest level keeps at least this many pixels along each axis.
    pub min_level_size: usize,
    pub window_radius: usize,
    pub iterations: usize,
    /// Tikhonov term added to the structure tensor.
    pub regularization: f64,
    /// Gaussian sigma applied to the flow after each level (0 disables).
    pub smoothing: f64,
}

impl Default for ClassicalFlow {
    fn default() -> Self {
        ClassicalFlow {
            max_levels: 4,
            min_level_size: 8,
            window_radius: 3,
            iterations: 3,
            regularization: 1e-3,
            smoothing: 1.0,
        }
    }
}

impl ClassicalFlow {
    pub fn estimate(&self, src: &Frame, dst: &Frame) -> Result<FlowField> {
        if src.dims() != dst.dims() {
            return Err(Error::shape(format!("flow pair {:?} vs {:?}", src.dims(), dst.dims())));
        }
        let s = luma(src.tensor());
        let d = luma(dst.tensor());
        let ps = self.pyramid(s);
        let pd = self.pyramid(d);
        let mut flow: Option<Tensor> = None;
        for (ls, ld) in ps.iter().zip(&pd).rev() {
            let (_, h, w) = ls.chw();
            let mut f = match flow {
                None => Tensor::zeros(&[2, h, w]),
                Some(prev) => upsample_flow(&prev, h, w),
            };
            for _ in 0..self.iterations {
                self.refine(ls, ld, &mut f);
            }
            if self.smoothing > 0.0 {
                f = smooth_flow(&f, self.smoothing);
            }
            flow = Some(f);
        }
        FlowField::new(flow.expect("at least one level"))
    }

    fn pyramid(&self, base: Tensor) -> Vec<Tensor> {
        let k = gaussian_kernel_1d(1.0, 5).expect("valid kernel");
        let mut levels = alloc::vec![base];
        while levels.len() < self.max_levels.max(1) {
            let (_, h, w) = levels.last().unwrap().chw();
            let (nh, nw) = (h / 2, w / 2);
            if nh < self.min_level_size || nw < self.min_level_size {
                break;
            }
            let prev = levels.last().unwrap();
            let blurred = apply_separable(prev, &Taps::convolve_reflect(w, &k), &Taps::convolve_reflect(h, &k));
            let down = Tensor::from_fn_chw(1, nh, nw, |_, y, x| {
                0.25 * (blurred.at(0, 2 * y, 2 * x)
                    + blurred.at(0, 2 * y + 1, 2 * x)
                    + blurred.at(0, 2 * y, 2 * x + 1)
                    + blurred.at(0, 2 * y + 1, 2 * x + 1))
            });
            levels.push(down);
        }
        levels
    }

    fn refine(&self, src: &Tensor, dst: &Tensor, flow: &mut Tensor) {
        let (_, h, w) = src.chw();
        let warped = warp_forward(src, flow, 1, h, w);
        let grad = |t: &Tensor, y: usize, x: usize| -> (f64, f64) {
            let xl = clamp_index(x as isize - 1, w);
            let xr = clamp_index(x as isize + 1, w);
            let yu = clamp_index(y as isize - 1, h);
            let yd = clamp_index(y as isize + 1, h);
            let gx = if xr > xl { (t.at(0, y, xr) - t.at(0, y, xl)) / (xr - xl) as f64 } else { 0.0 };
            let gy = if yd > yu { (t.at(0, yd, x) - t.at(0, yu, x)) / (yd - yu) as f64 } else { 0.0 };
            (gx, gy)
        };
        // Products: Ix^2, IxIy, Iy^2, IxIt, IyIt.
        let mut prod = Tensor::zeros(&[5, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (wx, wy) = grad(&warped, y, x);
                let (dx, dy) = grad(dst, y, x);
                let ix = 0.5 * (wx + dx);
                let iy = 0.5 * (wy + dy);
                let it = warped.at(0, y, x) - dst.at(0, y, x);
                prod.set(0, y, x, ix * ix);
                prod.set(1, y, x, ix * iy);
                prod.set(2, y, x, iy * iy);
                prod.set(3, y, x, ix * it);
                prod.set(4, y, x, iy * it);
            }
        }
        let r = self.window_radius;
        let boxk = alloc::vec![1.0; 2 * r + 1];
        let sums = apply_separable(&prod, &Taps::convolve_reflect(w, &boxk), &Taps::convolve_reflect(h, &boxk));
        let lam = self.regularization * ((2 * r + 1) * (2 * r + 1)) as f64;
        for y in 0..h {
            for x in 0..w {
                let a11 = sums.at(0, y, x) + lam;
                let a12 = sums.at(1, y, x);
                let a22 = sums.at(2, y, x) + lam;
                let b1 = sums.at(3, y, x);
                let b2 = sums.at(4, y, x);
                let det = a11 * a22 - a12 * a12;
                if det <= 0.0 {
                    continue;
                }
                let ddx = (-(a22 * b1) + a12 * b2) / det;
                let ddy = (a12 * b1 - a11 * b2) / det;
                flow.set(0, y, x, flow.at(0, y, x) + ddx.clamp(-1.0, 1.0));
                flow.set(1, y, x, flow.at(1, y, x) + ddy.clamp(-1.0, 1.0));
            }
        }
    }
}

fn smooth_flow(f: &Tensor, sigma: f64) -> Tensor {
    let (_, h, w) = f.chw();
    let ksize = 2 * libm::ceil(2.0 * sigma) as usize + 1;
    let k = gaussian_kernel_1d(sigma, ksize).expect("valid kernel");
    apply_separable(f, &Taps::convolve_reflect(w, &k), &Taps::convolve_reflect(h, &k))
}

/// Nearest 2x enlargement of a coarse flow to `(h, w)`, doubling vectors.
fn upsample_flow(prev: &Tensor, h: usize, w: usize) -> Tensor {
    let (_, ph, pw) = prev.chw();
    Tensor::from_fn_chw(2, h, w, |c, y, x| 2.0 * prev.at(c, (y / 2).min(ph - 1), (x / 2).min(pw - 1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnedFlowConfig {
    pub levels: usize,
    pub width: usize,
}

impl Default for LearnedFlowConfig {
    fn default() -> Self {
        LearnedFlowConfig { levels: 3, width: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FlowLevel {
    c1: Conv2d,
    c2: Conv2d,
    out: Conv2d,
}

/// Small coarse-to-fine convolutional flow network. Each level sees
/// `[warped src, dst, current flow]` (8 channels) and predicts a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedFlow {
    config: LearnedFlowConfig,
    levels: Vec<FlowLevel>,
    params: ParamStore,
}

impl LearnedFlow {
    pub fn new(config: LearnedFlowConfig, seed: u64) -> Result<Self> {
        if config.levels == 0 || config.width == 0 {
            return Err(Error::Config("learned flow needs >= 1 level and width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(FLOW_GROUP);
        let wd = config.width;
        let levels = (0..config.levels)
            .map(|l| FlowLevel {
                c1: Conv2d::same3(&mut params, &format!("flow.l{l}.c1"), 8, wd, Init::LEAKY, &mut rng),
                c2: Conv2d::same3(&mut params, &format!("flow.l{l}.c2"), wd, wd, Init::LEAKY, &mut rng),
                out: Conv2d::same3(&mut params, &format!("flow.l{l}.out"), wd, 2, Init::Zeros, &mut rng),
            })
            .collect();
        Ok(LearnedFlow { config, levels, params })
    }

    pub fn config(&self) -> LearnedFlowConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Differentiable flow from `src` to `dst` (both `[3, h, w]`).
    pub fn forward(&self, g: &mut Graph, src: Var, dst: Var) -> Result<Var> {
        let (_, h, w) = g.value(src).chw();
        ensure_same_shape("learned flow pair", g.value(src).shape(), g.value(dst).shape())?;
        let mut srcs = alloc::vec![src];
        let mut dsts = alloc::vec![dst];
        for _ in 1..self.levels.len() {
            let s = g.avg_pool2(*srcs.last().unwrap())?;
            let d = g.avg_pool2(*dsts.last().unwrap())?;
            srcs.push(s);
            dsts.push(d);
        }
        let mut flow: Option<Var> = None;
        for (l, level) in self.levels.iter().enumerate().rev() {
            let (_, lh, lw) = g.value(srcs[l]).chw();
            let (warped, cur) = match flow {
                None => {
                    let z = g.input(Tensor::zeros(&[2, lh, lw]));
                    (srcs[l], z)
                }
                Some(f) => {
                    let up = g.upsample_nearest2(f, lh, lw)?;
                    let up = g.scale(up, 2.0);
                    (g.warp(srcs[l], up)?, up)
                }
            };
            let x = g.concat(&[warped, dsts[l], cur])?;
            let y = level.c1.forward(g, &self.params, x)?;
            let y = g.leaky_relu(y, 0.2);
            let y = level.c2.forward(g, &self.params, y)?;
            let y = g.leaky_relu(y, 0.2);
            let res = level.out.forward(g, &self.params, y)?;
            flow = Some(if flow.is_none() { res } else { g.add(cur, res)? });
        }
        let f = flow.expect("at least one level");
        debug_assert_eq!(g.value(f).shape(), &[2, h, w]);
        Ok(f)
    }
}

/// Source of flow fields for alignment, the warping objective and tOF.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowEstimator {
    Zero,
    Learned(LearnedFlow),
    Classical(ClassicalFlow),
}

impl FlowEstimator {
    pub fn classical() -> Self {
        FlowEstimator::Classical(ClassicalFlow::default())
    }

    pub fn tag(&self) -> &'static str {
        match self {
            FlowEstimator::Zero => "zero",
            FlowEstimator::Learned(_) => "learned",
            FlowEstimator::Classical(_) => "pyramid-classical",
        }
    }

    /// Flow from `src` to `dst`, on `dst`'s grid.
    pub fn estimate(&self, src: &Frame, dst: &Frame) -> Result<FlowField> {
        if src.dims() != dst.dims() {
            return Err(Error::shape(format!("flow pair {:?} vs {:?}", src.dims(), dst.dims())));
        }
        match self {
            FlowEstimator::Zero => {
                let (h, w) = src.dims();
                Ok(FlowField::zeros(h, w))
            }
            FlowEstimator::Classical(c) => c.estimate(src, dst),
            FlowEstimator::Learned(net) => {
                let mut g = Graph::new();
                let s = g.input(src.tensor().clone());
                let d = g.input(dst.tensor().clone());
                let f = net.forward(&mut g, s, d)?;
                FlowField::new(g.value(f).clone())
            }
        }
    }

    /// Flow as a graph node; differentiable in the learned network's
    /// parameters, a constant for the other variants.
    pub fn estimate_var(&self, g: &mut Graph, src: Var, dst: Var) -> Result<Var> {
        match self {
            FlowEstimator::Learned(net) => net.forward(g, src, dst),
            other => {
                let s = Frame::from_tensor_clamped(g.value(src).clone())?;
                let d = Frame::from_tensor_clamped(g.value(dst).clone())?;
                let f = other.estimate(&s, &d)?;
                Ok(g.input(f.into_tensor()))
            }
        }
    }
}

pub fn estimate_flow(est: &FlowEstimator, src: &Frame, dst: &Frame) -> Result<FlowField> {
    est.estimate(src, dst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize, shift: f64) -> Frame {
        // Smooth periodic texture so that a shift is exact everywhere.
        let tau = core::f64::consts::TAU;
        Frame::from_fn(h, w, |c, y, x| {
            let xs = x as f64 - shift;
            let (fx, fy) = (xs / w as f64, y as f64 / h as f64);
            let v = 0.5
                + 0.2 * libm::sin(tau * (2.0 * fx + fy) + c as f64)
                + 0.15 * libm::cos(tau * (3.0 * fy - fx))
                + 0.1 * libm::sin(tau * (fx * 3.0 + 2.0 * fy));
            v.clamp(0.0, 1.0)
        })
        .unwrap()
    }

    fn lcg(h: usize, w: usize, seed: u64) -> Frame {
        let mut s = seed;
        Frame::from_fn(h, w, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    #[test]
    fn zero_variant_is_zero() {
        let a = lcg(9, 7, 1);
        let b = lcg(9, 7, 2);
        let f = FlowEstimator::Zero.estimate(&a, &b).unwrap();
        assert!(f.tensor().data().iter().all(|&v| v == 0.0));
        assert!(FlowEstimator::Zero.estimate(&a, &lcg(9, 8, 2)).is_err());
    }

    #[test]
    fn classical_identical_frames_give_no_motion() {
        let a = texture(48, 48, 0.0);
        let f = FlowEstimator::classical().estimate(&a, &a).unwrap();
        assert!(f.mean_magnitude() < 0.05);
    }

    #[test]
    fn classical_recovers_translation() {
        // dst(x) = src(x + 2) when src is dst translated 2 px to the right.
        let dst = texture(64, 64, 0.0);
        let src = texture(64, 64, 2.0);
        let f = FlowEstimator::classical().estimate(&src, &dst).unwrap();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 16..48 {
            for x in 16..48 {
                sx += f.dx(y, x);
                sy += libm::fabs(f.dy(y, x));
                n += 1.0;
            }
        }
        let (mdx, mdy) = (sx / n, sy / n);
        assert!((mdx - 2.0).abs() < 0.5, "mean dx {mdx}");
        assert!(mdy < 0.5, "mean |dy| {mdy}");
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let a = lcg(8, 8, 3);
        assert_eq!(warp(&a, &FlowField::zeros(8, 8)).unwrap(), a);
    }

    #[test]
    fn warp_integer_shift() {
        let a = lcg(8, 8, 4);
        let out = warp(&a, &FlowField::constant(8, 8, 1.0, 0.0)).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..7 {
                    assert_eq!(out.at(c, y, x), a.at(c, y, x + 1));
                }
                // Clamped border column repeats the last column.
                assert_eq!(out.at(c, y, 7), a.at(c, y, 7));
            }
        }
    }

    #[test]
    fn warp_half_pixel_averages_neighbours() {
        let ramp = Frame::from_fn(4, 8, |_, _, x| (x * x) as f64 / 49.0).unwrap();
        let out = warp(&ramp, &FlowField::constant(4, 8, 0.5, 0.0)).unwrap();
        for x in 0..7 {
            let expect = 0.5 * (ramp.at(0, 1, x) + ramp.at(0, 1, x + 1));
            assert!((out.at(0, 1, x) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn warp_is_linear_in_frame() {
        let a = lcg(6, 6, 5).into_tensor();
        let b = lcg(6, 6, 6).into_tensor();
        let flow = FlowField::new(Tensor::from_fn_chw(2, 6, 6, |c, y, x| {
            0.37 * (x as f64 - 2.5) * if c == 0 { 1.0 } else { -0.5 } + 0.11 * y as f64
        }))
        .unwrap();
        let mix = a.zip_map(&b, |x, y| 0.3 * x - 1.7 * y).unwrap();
        let lhs = warp_tensor(&mix, &flow).unwrap();
        let wa = warp_tensor(&a, &flow).unwrap();
        let wb = warp_tensor(&b, &flow).unwrap();
        let rhs = wa.zip_map(&wb, |x, y| 0.3 * x - 1.7 * y).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn learned_flow_starts_at_zero_and_keeps_dims() {
        let net = LearnedFlow::new(LearnedFlowConfig::default(), 3).unwrap();
        let est = FlowEstimator::Learned(net);
        for (h, w) in [(8, 8), (13, 9), (32, 17)] {
            let f = est.estimate(&lcg(h, w, 1), &lcg(h, w, 2)).unwrap();
            assert_eq!(f.dims(), (h, w));
            assert!(f.tensor().data().iter().all(|&v| v == 0.0));
        }
    }
}
