//! Separable filtering and resampling kernels shared by the degradation
//! pipeline, the bicubic skip path and the metrics.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bicubic convolution coefficient.
pub const BICUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with coefficient `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = libm::fabs(x);
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized 1-D Gaussian taps of length `ksize` centered at `ksize / 2`.
pub fn gaussian_kernel_1d(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(alloc::format!("gaussian sigma must be > 0, got {sigma}")));
    }
    if ksize.is_multiple_of(2) {
        return Err(Error::invalid(alloc::format!("gaussian ksize must be odd, got {ksize}")));
    }
    let r = (ksize / 2) as f64;
    let mut k: Vec<f64> = (0..ksize)
        .map(|i| {
            let d = i as f64 - r;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Mirror index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`), periodic with period `2(n - 1)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// For every output sample, the source samples and weights that produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub src_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl Taps {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// Same-length convolution with a symmetric kernel and mirrored borders.
    pub fn convolve_reflect(n: usize, kernel: &[f64]) -> Self {
        let r = (kernel.len() / 2) as isize;
        let taps = (0..n as isize)
            .map(|i| {
                let mut t: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
                for (j, &k) in kernel.iter().enumerate() {
                    let src = reflect_index(i + j as isize - r, n);
                    match t.iter_mut().find(|(s, _)| *s == src) {
                        Some(e) => e.1 += k,
                        None => t.push((src, k)),
                    }
                }
                t
            })
            .collect();
        Taps { src_len: n, taps }
    }

    /// Pixel-center-aligned bicubic resampling from `src_len` to `dst_len`
    /// samples with clamped borders. No kernel widening on downscale.
    pub fn bicubic(src_len: usize, dst_len: usize) -> Self {
        let ratio = src_len as f64 / dst_len as f64;
        let taps = (0..dst_len)
            .map(|i| {
                let u = (i as f64 + 0.5) * ratio - 0.5;
                let base = libm::floor(u) as isize;
                let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
                for off in -1..=2isize {
                    let j = base + off;
                    let wgt = cubic_kernel(u - j as f64, BICUBIC_A);
                    if wgt == 0.0 {
                        continue;
                    }
                    let src = clamp_index(j, src_len);
                    match t.iter_mut().find(|(s, _)| *s == src) {
                        Some(e) => e.1 += wgt,
                        None => t.push((src, wgt)),
                    }
                }
                t
            })
            .collect();
        Taps { src_len, taps }
    }
}

/// Applies row taps (along x) then column taps (along y) to each channel.
pub fn apply_separable(x: &Tensor, rows: &Taps, cols: &Taps) -> Tensor {
    let (c, h, w) = x.chw();
    debug_assert_eq!(rows.src_len, w);
    debug_assert_eq!(cols.src_len, h);
    let ow = rows.out_len();
    let oh = cols.out_len();
    let mut tmp = alloc::vec![0.0; h * ow];
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        let src = x.plane(ci);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (ox, t) in rows.taps.iter().enumerate() {
                tmp[y * ow + ox] = t.iter().map(|&(s, k)| row[s] * k).sum();
            }
        }
        let dst = out.plane_mut(ci);
        for (oy, t) in cols.taps.iter().enumerate() {
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for &(s, k) in t {
                let srow = &tmp[s * ow..(s + 1) * ow];
                for (d, v) in drow.iter_mut().zip(srow) {
                    *d += k * v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`apply_separable`]: maps an output-shaped gradient back to the
/// input shape.
pub fn apply_separable_adjoint(g: &Tensor, rows: &Taps, cols: &Taps) -> Tensor {
    let (c, _, ow) = g.chw();
    let h = cols.src_len;
    let w = rows.src_len;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut tmp = alloc::vec![0.0; h * ow];
    for ci in 0..c {
        tmp.iter_mut().for_each(|v| *v = 0.0);
        let gp = g.plane(ci);
        for (oy, t) in cols.taps.iter().enumerate() {
            let grow = &gp[oy * ow..(oy + 1) * ow];
            for &(s, k) in t {
                let trow = &mut tmp[s * ow..(s + 1) * ow];
                for (d, v) in trow.iter_mut().zip(grow) {
                    *d += k * v;
                }
            }
        }
        let dst = out.plane_mut(ci);
        for y in 0..h {
            for (ox, t) in rows.taps.iter().enumerate() {
                let gv = tmp[y * ow + ox];
                for &(s, k) in t {
                    dst[y * w + s] += k * gv;
                }
            }
        }
    }
    out
}

/// Bicubic resize of every channel of a `[c, h, w]` tensor (unclamped).
pub fn resize_bicubic(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (_, h, w) = x.chw();
    apply_separable(x, &Taps::bicubic(w, out_w), &Taps::bicubic(h, out_h))
}
