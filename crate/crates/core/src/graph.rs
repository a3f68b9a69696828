//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. Nodes are created in
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters are bound from a [`ParamStore`]; binding the same parameter
//! twice yields the same node, so shared weights accumulate gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure_same_shape, Error, Result};
use crate::linalg::{col2im, gemm, im2col, ConvGeom};
use crate::nn::{GroupId, ParamId, ParamStore};
use crate::resample::{apply_separable, apply_separable_adjoint, Taps};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    PRelu { x: Var, alpha: Var },
    LeakyRelu { x: Var, slope: f64 },
    Concat(Vec<Var>),
    Warp { frame: Var, flow: Var },
    Resample { x: Var, rows: Taps, cols: Taps },
    AvgPool2(Var),
    UpsampleNearest(Var),
    GlobalAvgPool(Var),
    SquareMean(Var),
    Mean(Var),
    CosineDistance { a: Var, b: Var, eps: f64 },
    Softplus(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<(GroupId, ParamId), Var>,
    frozen: Vec<GroupId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `group` bound after this call are constants.
    pub fn freeze_group(&mut self, group: GroupId) {
        if !self.frozen.contains(&group) {
            self.frozen.push(group);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (used by gradient probes).
    pub fn tracked(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies `v`'s value into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.group(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let grad = !self.frozen.contains(&store.group());
        let v = self.push(store.get(id).clone(), Op::Param, grad);
        self.params.insert(key, v);
        v
    }

    fn chw_of(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        let t = self.value(v);
        if !t.is_chw() {
            return Err(Error::shape(format!("{what}: expected [c, h, w], got {:?}", t.shape())));
        }
        Ok(t.chw())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.chw_of(x, "conv2d input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d weight {ws:?} for {c}-channel input")));
        }
        let (co, k) = (ws[0], ws[2]);
        let g = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d k={k} s={stride} p={pad} on {h}x{wd}")))?;
        if let Some(b) = b {
            ensure_same_shape("conv2d bias", self.value(b).shape(), &[co])?;
        }
        let n = g.cols();
        let mut out = Tensor::zeros(&[co, g.oh, g.ow]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if g.is_pointwise() {
                gemm(co, g.rows(), n, wv, false, xv, false, out.data_mut(), 0.0);
            } else {
                let mut col = vec![0.0; g.rows() * n];
                im2col(xv, &g, &mut col);
                gemm(co, g.rows(), n, wv, false, &col, false, out.data_mut(), 0.0);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, chunk) in out.data_mut().chunks_mut(n).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[o]);
                }
            }
        }
        let grad = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, grad))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.chw_of(x, "conv_transpose2d input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv_transpose2d weight {ws:?} for {c}-channel input")));
        }
        let (co, k) = (ws[1], ws[2]);
        if stride == 0 || (h - 1) * stride + k <= 2 * pad || (wd - 1) * stride + k <= 2 * pad {
            return Err(Error::shape(format!("conv_transpose2d k={k} s={stride} p={pad} on {h}x{wd}")));
        }
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let g = ConvGeom::new(co, oh, ow, k, stride, pad).expect("valid transpose geometry");
        debug_assert_eq!((g.oh, g.ow), (h, wd));
        if let Some(b) = b {
            ensure_same_shape("conv_transpose2d bias", self.value(b).shape(), &[co])?;
        }
        let n = h * wd;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut col = vec![0.0; g.rows() * n];
            gemm(g.rows(), c, n, wv, true, xv, false, &mut col, 0.0);
            col2im(&col, &g, out.data_mut());
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, chunk) in out.data_mut().chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[o]);
                }
            }
        }
        let grad = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), grad))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), grad))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let grad = self.needs(a);
        self.push(v, Op::Scale(a, s), grad)
    }

    /// `sum_i w_i * x_i` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum of zero terms"))?;
        let mut out = Tensor::zeros(self.value(first).shape());
        for &(v, w) in terms {
            ensure_same_shape("weighted_sum", self.value(v).shape(), out.shape())?;
            out.add_scaled(self.value(v), w);
        }
        let grad = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), grad))
    }

    /// Per-channel parametric ReLU; `alpha` is `[c]` or `[1]`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (c, h, w) = self.chw_of(x, "prelu")?;
        let an = self.value(alpha).numel();
        if an != c && an != 1 {
            return Err(Error::shape(format!("prelu alpha has {an} values for {c} channels")));
        }
        let a = self.value(alpha).data().to_vec();
        let mut out = self.value(x).clone();
        for (ci, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let s = if an == 1 { a[0] } else { a[ci] };
            chunk.iter_mut().for_each(|v| {
                if *v <= 0.0 {
                    *v *= s
                }
            });
        }
        let grad = self.needs(x) || self.needs(alpha);
        Ok(self.push(out, Op::PRelu { x, alpha }, grad))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v * slope });
        let grad = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, grad)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&refs)?;
        let grad = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Concat(parts.to_vec()), grad))
    }

    /// Bilinear backward warp: `out(y, x) = frame(y + dy, x + dx)` with
    /// sample coordinates clamped into the frame.
    pub fn warp(&mut self, frame: Var, flow: Var) -> Result<Var> {
        let (c, h, w) = self.chw_of(frame, "warp frame")?;
        ensure_same_shape("warp flow", self.value(flow).shape(), &[2, h, w])?;
        let out = warp_forward(self.value(frame), self.value(flow), c, h, w);
        let grad = self.needs(frame) || self.needs(flow);
        Ok(self.push(out, Op::Warp { frame, flow }, grad))
    }

    /// Linear separable resampling with precomputed taps.
    pub fn resample(&mut self, x: Var, rows: Taps, cols: Taps) -> Result<Var> {
        let (_, h, w) = self.chw_of(x, "resample")?;
        if rows.src_len != w || cols.src_len != h {
            return Err(Error::shape(format!(
                "resample taps for {}x{} on {h}x{w}",
                cols.src_len, rows.src_len
            )));
        }
        let out = apply_separable(self.value(x), &rows, &cols);
        let grad = self.needs(x);
        Ok(self.push(out, Op::Resample { x, rows, cols }, grad))
    }

    /// Bicubic enlargement by an integer factor (unclamped, differentiable).
    pub fn bicubic_upsample(&mut self, x: Var, scale: usize) -> Result<Var> {
        let (_, h, w) = self.chw_of(x, "bicubic_upsample")?;
        self.resample(x, Taps::bicubic(w, w * scale), Taps::bicubic(h, h * scale))
    }

    /// 2x2 average pooling; odd trailing rows/columns average what exists.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw_of(x, "avg_pool2")?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x);
        let out = Tensor::from_fn_chw(c, oh, ow, |ci, oy, ox| {
            let mut s = 0.0;
            let mut n = 0.0;
            for y in 2 * oy..(2 * oy + 2).min(h) {
                for xx in 2 * ox..(2 * ox + 2).min(w) {
                    s += xv.at(ci, y, xx);
                    n += 1.0;
                }
            }
            s / n
        });
        let grad = self.needs(x);
        Ok(self.push(out, Op::AvgPool2(x), grad))
    }

    /// Nearest-neighbour enlargement to `(oh, ow)` with `src = dst / 2`.
    pub fn upsample_nearest2(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.chw_of(x, "upsample_nearest2")?;
        if oh.div_ceil(2) != h || ow.div_ceil(2) != w {
            return Err(Error::shape(format!("cannot upsample {h}x{w} to {oh}x{ow}")));
        }
        let xv = self.value(x);
        let out = Tensor::from_fn_chw(c, oh, ow, |ci, y, xx| xv.at(ci, y / 2, xx / 2));
        let grad = self.needs(x);
        Ok(self.push(out, Op::UpsampleNearest(x), grad))
    }

    /// `[c, h, w] -> [c, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw_of(x, "global_avg_pool")?;
        let xv = self.value(x);
        let n = (h * w) as f64;
        let out = Tensor::from_fn_chw(c, 1, 1, |ci, _, _| xv.plane(ci).iter().sum::<f64>() / n);
        let grad = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), grad))
    }

    /// Mean of squared entries, as a `[1]` scalar.
    pub fn square_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.dot(xv) / xv.numel() as f64;
        let grad = self.needs(x);
        self.push(Tensor::scalar(m), Op::SquareMean(x), grad)
    }

    /// Mean of all entries, as a `[1]` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let grad = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), grad)
    }

    /// Mean squared difference of two same-shaped operands.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.square_mean(d))
    }

    /// `1 - a.b / (|a| |b| + eps)` over flattened operands.
    pub fn cosine_distance(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        ensure_same_shape("cosine_distance", self.value(a).shape(), self.value(b).shape())?;
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.norm() * bv.norm() + eps;
        let out = Tensor::scalar(1.0 - av.dot(bv) / d);
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::CosineDistance { a, b, eps }, grad))
    }

    /// Elementwise `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let grad = self.needs(x);
        self.push(out, Op::Softplus(x), grad)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        if self.needs(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(&k, &v)| (k, v))
            .collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                self.conv_transpose2d_backward(*x, *w, *b, *stride, *pad, g, grads)
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, g.scale(w));
                }
            }
            Op::PRelu { x, alpha } => {
                let xv = self.value(*x);
                let (_, h, w) = xv.chw();
                let av = self.value(*alpha).data();
                let shared = av.len() == 1;
                let mut dx = g.clone();
                let mut da = vec![0.0; av.len()];
                for (ci, (dchunk, xchunk)) in dx
                    .data_mut()
                    .chunks_mut(h * w)
                    .zip(xv.data().chunks(h * w))
                    .enumerate()
                {
                    let ai = if shared { 0 } else { ci };
                    for (d, &xval) in dchunk.iter_mut().zip(xchunk) {
                        if xval <= 0.0 {
                            da[ai] += *d * xval;
                            *d *= av[ai];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                let ashape = self.value(*alpha).shape().to_vec();
                self.accumulate(grads, *alpha, Tensor::from_vec(&ashape, da).expect("alpha shape"));
            }
            Op::LeakyRelu { x, slope } => {
                let dx = g
                    .zip_map(self.value(*x), |d, xv| if xv > 0.0 { d } else { d * slope })
                    .expect("same shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[0];
                    if self.needs(p) {
                        self.accumulate(grads, p, g.channel_slice(start, c).expect("concat slice"));
                    }
                    start += c;
                }
            }
            Op::Warp { frame, flow } => {
                let (df, dflow) = warp_backward(
                    self.value(*frame),
                    self.value(*flow),
                    g,
                    self.needs(*frame),
                    self.needs(*flow),
                );
                if let Some(df) = df {
                    self.accumulate(grads, *frame, df);
                }
                if let Some(dflow) = dflow {
                    self.accumulate(grads, *flow, dflow);
                }
            }
            Op::Resample { x, rows, cols } => {
                self.accumulate(grads, *x, apply_separable_adjoint(g, rows, cols));
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let dx = Tensor::from_fn_chw(c, h, w, |ci, y, xx| {
                    let (oy, ox) = (y / 2, xx / 2);
                    let ny = (2 * oy + 2).min(h) - 2 * oy;
                    let nx = (2 * ox + 2).min(w) - 2 * ox;
                    g.at(ci, oy, ox) / (ny * nx) as f64
                });
                self.accumulate(grads, *x, dx);
            }
            Op::UpsampleNearest(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = g.chw();
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = dx.at(ci, y / 2, xx / 2) + g.at(ci, y, xx);
                            dx.set(ci, y / 2, xx / 2, v);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw();
                let n = (h * w) as f64;
                let dx = Tensor::from_fn_chw(c, h, w, |ci, _, _| g.at(ci, 0, 0) / n);
                self.accumulate(grads, *x, dx);
            }
            Op::SquareMean(x) => {
                let xv = self.value(*x);
                let k = 2.0 * g.data()[0] / xv.numel() as f64;
                self.accumulate(grads, *x, xv.scale(k));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let k = g.data()[0] / xv.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), k));
            }
            Op::CosineDistance { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb) = (av.norm(), bv.norm());
                let s = av.dot(bv);
                let d = na * nb + eps;
                let gs = g.data()[0];
                // d(1 - s/d)/da = -(b/d - s nb a / (na d^2))
                let part = |x: &Tensor, y: &Tensor, nx: f64, ny: f64| -> Tensor {
                    let mut out = y.scale(-gs / d);
                    if nx > 0.0 {
                        out.add_scaled(x, gs * s * ny / (nx * d * d));
                    }
                    out
                };
                if self.needs(*a) {
                    self.accumulate(grads, *a, part(av, bv, na, nb));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, part(bv, av, nb, na));
                }
            }
            Op::Softplus(x) => {
                let dx = g.zip_map(self.value(*x), |d, xv| d * sigmoid(xv)).expect("same shape");
                self.accumulate(grads, *x, dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (c, h, wd) = xv.chw();
        let co = wv.shape()[0];
        let k = wv.shape()[2];
        let geo = ConvGeom::new(c, h, wd, k, stride, pad).expect("forward geometry");
        let n = geo.cols();
        if let Some(b) = b {
            if self.needs(b) {
                let db: Vec<f64> = g.data().chunks(n).map(|ch| ch.iter().sum()).collect();
                self.accumulate(grads, b, Tensor::from_vec(&[co], db).expect("bias"));
            }
        }
        let pointwise = geo.is_pointwise();
        if self.needs(w) {
            let mut dw = Tensor::zeros(wv.shape());
            if pointwise {
                gemm(co, n, geo.rows(), g.data(), false, xv.data(), true, dw.data_mut(), 0.0);
            } else {
                let mut col = vec![0.0; geo.rows() * n];
                im2col(xv.data(), &geo, &mut col);
                gemm(co, n, geo.rows(), g.data(), false, &col, true, dw.data_mut(), 0.0);
            }
            self.accumulate(grads, w, dw);
        }
        if self.needs(x) {
            let mut dx = Tensor::zeros(xv.shape());
            if pointwise {
                gemm(geo.rows(), co, n, wv.data(), true, g.data(), false, dx.data_mut(), 0.0);
            } else {
                let mut dcol = vec![0.0; geo.rows() * n];
                gemm(geo.rows(), co, n, wv.data(), true, g.data(), false, &mut dcol, 0.0);
                col2im(&dcol, &geo, dx.data_mut());
            }
            self.accumulate(grads, x, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (c, h, wd) = xv.chw();
        let (co, oh, ow) = g.chw();
        let k = wv.shape()[2];
        let geo = ConvGeom::new(co, oh, ow, k, stride, pad).expect("forward geometry");
        let n = h * wd;
        if let Some(b) = b {
            if self.needs(b) {
                let db: Vec<f64> = g.data().chunks(oh * ow).map(|ch| ch.iter().sum()).collect();
                self.accumulate(grads, b, Tensor::from_vec(&[co], db).expect("bias"));
            }
        }
        if !self.needs(w) && !self.needs(x) {
            return;
        }
        let mut dcol = vec![0.0; geo.rows() * n];
        im2col(g.data(), &geo, &mut dcol);
        if self.needs(w) {
            let mut dw = Tensor::zeros(wv.shape());
            gemm(c, n, geo.rows(), xv.data(), false, &dcol, true, dw.data_mut(), 0.0);
            self.accumulate(grads, w, dw);
        }
        if self.needs(x) {
            let mut dx = Tensor::zeros(xv.shape());
            gemm(c, geo.rows(), n, wv.data(), false, &dcol, false, dx.data_mut(), 0.0);
            self.accumulate(grads, x, dx);
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<((GroupId, ParamId), Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter of `store` bound in the graph, indexed
    /// by parameter id; unbound or unreached parameters are `None`.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for &((group, id), v) in &self.params {
            if group == store.group() {
                out[id.index()] = self.wrt(v).cloned();
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

struct BilinearSample {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the unclamped coordinate lies strictly inside the frame.
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn bilinear_at(sx: f64, sy: f64, h: usize, w: usize) -> BilinearSample {
    let maxx = (w - 1) as f64;
    let maxy = (h - 1) as f64;
    let cx = sx.clamp(0.0, maxx);
    let cy = sy.clamp(0.0, maxy);
    let x0 = (libm::floor(cx) as usize).min(w - 1);
    let y0 = (libm::floor(cy) as usize).min(h - 1);
    BilinearSample {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: cx - x0 as f64,
        fy: cy - y0 as f64,
        inside_x: sx > 0.0 && sx < maxx,
        inside_y: sy > 0.0 && sy < maxy,
    }
}

pub(crate) fn warp_forward(frame: &Tensor, flow: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[c, h, w]);
    let (fdx, fdy) = (flow.plane(0), flow.plane(1));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let s = bilinear_at(x as f64 + fdx[i], y as f64 + fdy[i], h, w);
            for ci in 0..c {
                let p = frame.plane(ci);
                let top = p[s.y0 * w + s.x0] * (1.0 - s.fx) + p[s.y0 * w + s.x1] * s.fx;
                let bot = p[s.y1 * w + s.x0] * (1.0 - s.fx) + p[s.y1 * w + s.x1] * s.fx;
                out.plane_mut(ci)[i] = top * (1.0 - s.fy) + bot * s.fy;
            }
        }
    }
    out
}

fn warp_backward(
    frame: &Tensor,
    flow: &Tensor,
    g: &Tensor,
    want_frame: bool,
    want_flow: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, w) = frame.chw();
    let mut df = want_frame.then(|| Tensor::zeros(&[c, h, w]));
    let mut dflow = want_flow.then(|| Tensor::zeros(&[2, h, w]));
    let (fdx, fdy) = (flow.plane(0), flow.plane(1));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let s = bilinear_at(x as f64 + fdx[i], y as f64 + fdy[i], h, w);
            let (i00, i01, i10, i11) = (
                s.y0 * w + s.x0,
                s.y0 * w + s.x1,
                s.y1 * w + s.x0,
                s.y1 * w + s.x1,
            );
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ci in 0..c {
                let gv = g.plane(ci)[i];
                if gv == 0.0 {
                    continue;
                }
                if let Some(df) = df.as_mut() {
                    let p = df.plane_mut(ci);
                    p[i00] += gv * (1.0 - s.fx) * (1.0 - s.fy);
                    p[i01] += gv * s.fx * (1.0 - s.fy);
                    p[i10] += gv * (1.0 - s.fx) * s.fy;
                    p[i11] += gv * s.fx * s.fy;
                }
                if dflow.is_some() {
                    let p = frame.plane(ci);
                    gx += gv * ((1.0 - s.fy) * (p[i01] - p[i00]) + s.fy * (p[i11] - p[i10]));
                    gy += gv * ((1.0 - s.fx) * (p[i10] - p[i00]) + s.fx * (p[i11] - p[i01]));
                }
            }
            if let Some(dflow) = dflow.as_mut() {
                if s.inside_x {
                    dflow.plane_mut(0)[i] += gx;
                }
                if s.inside_y {
                    dflow.plane_mut(1)[i] += gy;
                }
            }
        }
    }
    (df, dflow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        let data = (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let mut d = a.clone();
        d.add_scaled(b, -1.0);
        d.norm() / a.norm().max(b.norm()).max(1e-12)
    }

    /// Checks d(loss)/d(input) for a unary graph builder at a random point.
    fn check_unary(shape: &[usize], seed: u64, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let x0 = pseudo(shape, seed);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.tracked(x0.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.wrt(v).unwrap().clone();
        let numeric = numeric_grad(&x0, &eval);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-6, "relative error {e}");
    }

    fn weighted_readout(g: &mut Graph, v: Var) -> Var {
        let shape = g.value(v).shape().to_vec();
        let wts = g.input(pseudo(&shape, 999));
        let p = g.sub(v, wts).unwrap();
        g.square_mean(p)
    }

    #[test]
    fn conv2d_gradients() {
        let mut store = ParamStore::new(7);
        let w = store.insert("w", pseudo(&[4, 3, 3, 3], 1));
        let b = store.insert("b", pseudo(&[4], 2));
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let s = &store;
            check_unary(&[3, 6, 5], 3, &|g, x| {
                let (wv, bv) = (g.param(s, w), g.param(s, b));
                let y = g.conv2d(x, wv, Some(bv), stride, pad).unwrap();
                weighted_readout(g, y)
            });
        }
        // Weight gradient.
        let x0 = pseudo(&[3, 6, 5], 4);
        let loss_for = |wt: &Tensor| {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let wv = g.input(wt.clone());
            let y = g.conv2d(x, wv, None, 2, 1).unwrap();
            weighted_readout(&mut g, y);
            let last = Var(g.len() - 1);
            g.scalar(last)
        };
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let wv = g.param(&store, w);
        let y = g.conv2d(x, wv, None, 2, 1).unwrap();
        let l = weighted_readout(&mut g, y);
        let grads = g.backward(l).for_store(&store);
        let numeric = numeric_grad(store.get(w), &loss_for);
        assert!(rel_err(grads[w.index()].as_ref().unwrap(), &numeric) < 1e-6);
        assert!(grads[b.index()].is_none());
    }

    #[test]
    fn pointwise_conv_gradients() {
        let mut store = ParamStore::new(1);
        let w = store.insert("w", pseudo(&[2, 3, 1, 1], 5));
        let s = &store;
        check_unary(&[3, 4, 4], 6, &|g, x| {
            let wv = g.param(s, w);
            let y = g.conv2d(x, wv, None, 1, 0).unwrap();
            weighted_readout(g, y)
        });
    }

    #[test]
    fn conv_transpose_gradients_and_shape() {
        let mut store = ParamStore::new(2);
        let w = store.insert("w", pseudo(&[3, 2, 4, 4], 8));
        let b = store.insert("b", pseudo(&[2], 9));
        let s = &store;
        let mut g = Graph::new();
        let x = g.input(pseudo(&[3, 5, 4], 1));
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let y = g.conv_transpose2d(x, wv, Some(bv), 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 10, 8]);
        check_unary(&[3, 5, 4], 10, &|g, x| {
            let (wv, bv) = (g.param(s, w), g.param(s, b));
            let y = g.conv_transpose2d(x, wv, Some(bv), 2, 1).unwrap();
            weighted_readout(g, y)
        });
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        let w = pseudo(&[3, 2, 4, 4], 8);
        let x = pseudo(&[2, 8, 6], 3);
        let y = pseudo(&[3, 4, 3], 4);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let cx = g.conv2d(xv, wv, None, 2, 1).unwrap();
        // Conv weight [out=3, in=2] reinterpreted as transpose weight [in=3, out=2].
        let yv = g.input(y.clone());
        let ty = g.conv_transpose2d(yv, wv, None, 2, 1).unwrap();
        let lhs = g.value(cx).dot(&y);
        let rhs = g.value(ty).dot(&x);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn activation_and_pool_gradients() {
        let mut store = ParamStore::new(3);
        let a = store.insert("a", Tensor::from_vec(&[3], alloc::vec![0.25, 0.1, -0.3]).unwrap());
        let s = &store;
        check_unary(&[3, 4, 3], 11, &|g, x| {
            let av = g.param(s, a);
            let y = g.prelu(x, av).unwrap();
            weighted_readout(g, y)
        });
        check_unary(&[2, 5, 3], 12, &|g, x| {
            let y = g.leaky_relu(x, 0.2);
            weighted_readout(g, y)
        });
        check_unary(&[2, 5, 3], 13, &|g, x| {
            let y = g.avg_pool2(x).unwrap();
            weighted_readout(g, y)
        });
        check_unary(&[2, 3, 2], 14, &|g, x| {
            let y = g.upsample_nearest2(x, 5, 4).unwrap();
            weighted_readout(g, y)
        });
        check_unary(&[2, 3, 2], 15, &|g, x| {
            let y = g.global_avg_pool(x).unwrap();
            weighted_readout(g, y)
        });
        check_unary(&[2, 3, 4], 16, &|g, x| {
            let y = g.bicubic_upsample(x, 4).unwrap();
            weighted_readout(g, y)
        });
        check_unary(&[1, 2, 3], 17, &|g, x| {
            let y = g.softplus(x);
            let y = g.scale(y, 3.0);
            weighted_readout(g, y)
        });
    }

    #[test]
    fn prelu_alpha_gradient() {
        let x0 = pseudo(&[2, 3, 3], 21);
        let mut store = ParamStore::new(4);
        let a = store.insert("a", Tensor::from_vec(&[2], alloc::vec![0.2, 0.4]).unwrap());
        let f = |at: &Tensor| {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let av = g.input(at.clone());
            let y = g.prelu(x, av).unwrap();
            let l = weighted_readout(&mut g, y);
            g.scalar(l)
        };
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let av = g.param(&store, a);
        let y = g.prelu(x, av).unwrap();
        let l = weighted_readout(&mut g, y);
        let grads = g.backward(l).for_store(&store);
        assert!(rel_err(grads[0].as_ref().unwrap(), &numeric_grad(store.get(a), &f)) < 1e-6);
    }

    #[test]
    fn cosine_distance_gradients() {
        let other = pseudo(&[2, 3, 3], 30);
        check_unary(&[2, 3, 3], 31, &|g, x| {
            let o = g.input(other.clone());
            g.cosine_distance(x, o, 1e-8).unwrap()
        });
        check_unary(&[2, 3, 3], 32, &|g, x| {
            let o = g.input(other.clone());
            g.cosine_distance(o, x, 1e-8).unwrap()
        });
    }

    #[test]
    fn concat_and_weighted_sum_gradients() {
        let other = pseudo(&[1, 3, 3], 40);
        check_unary(&[2, 3, 3], 41, &|g, x| {
            let o = g.input(other.clone());
            let c = g.concat(&[o, x, x]).unwrap();
            weighted_readout(g, c)
        });
        check_unary(&[2, 3, 3], 42, &|g, x| {
            let s = g.square_mean(x);
            let t = g.scale(s, 2.0);
            g.weighted_sum(&[(s, 0.5), (t, -1.5)]).unwrap()
        });
    }

    #[test]
    fn warp_gradients() {
        let frame = pseudo(&[2, 6, 6], 50);
        // Flow keeps sample coordinates inside the frame and off integer grid lines.
        let flow = Tensor::from_fn_chw(2, 6, 6, |c, y, x| {
            let p = if c == 0 { x } else { y } as f64;
            let target = 0.6 + (p * 0.77 + (c as f64) * 0.31 + (x * y) as f64 * 0.013) % 4.1;
            target - p
        });
        let fl = flow.clone();
        check_unary(&[2, 6, 6], 51, &|g, x| {
            let f = g.input(fl.clone());
            let y = g.warp(x, f).unwrap();
            weighted_readout(g, y)
        });
        let fr = frame.clone();
        let eval = |f: &Tensor| {
            let mut g = Graph::new();
            let x = g.input(fr.clone());
            let fv = g.input(f.clone());
            let y = g.warp(x, fv).unwrap();
            let l = weighted_readout(&mut g, y);
            g.scalar(l)
        };
        let mut g = Graph::new();
        let x = g.input(frame.clone());
        let fv = g.tracked(flow.clone());
        let y = g.warp(x, fv).unwrap();
        let l = weighted_readout(&mut g, y);
        let grads = g.backward(l);
        let e = rel_err(grads.wrt(fv).unwrap(), &numeric_grad(&flow, &eval));
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new(5);
        let w = store.insert("w", Tensor::full(&[1, 1, 1, 1], 2.0));
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 1], 3.0));
        let w1 = g.param(&store, w);
        let w2 = g.param(&store, w);
        assert_eq!(w1, w2);
        let y1 = g.conv2d(x, w1, None, 1, 0).unwrap();
        let y2 = g.conv2d(y1, w2, None, 1, 0).unwrap();
        let l = g.square_mean(y2);
        // l = (3 w^2)^2 = 9 w^4 -> dl/dw = 36 w^3 = 288
        let grads = g.backward(l).for_store(&store);
        assert!((grads[0].as_ref().unwrap().data()[0] - 288.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut store = ParamStore::new(6);
        let w = store.insert("w", Tensor::full(&[1, 1, 1, 1], 2.0));
        let mut g = Graph::new();
        g.freeze_group(6);
        let x = g.tracked(Tensor::full(&[1, 1, 1], 3.0));
        let wv = g.param(&store, w);
        let y = g.conv2d(x, wv, None, 1, 0).unwrap();
        let l = g.square_mean(y);
        let grads = g.backward(l);
        assert!(grads.for_store(&store)[0].is_none());
        assert!(grads.wrt(x).is_some());
    }
}
