//! Degradation pipeline (Gaussian blur followed by bicubic x4 decimation)
//! and aligned crop sampling for self-supervised LR/HR pairs.
//!
//! Manifest loading and PNG decoding live in the `vsr` crate; everything
//! here operates on in-memory frames.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, LrHrPair, VideoClip};
use crate::resample::{apply_separable, gaussian_kernel_1d, resize_bicubic, Taps};
use crate::tensor::Tensor;
use crate::SCALE;

/// Degradation knobs. Blur runs before decimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub sigma: f64,
    pub ksize: usize,
    pub scale: usize,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            sigma: 1.5,
            ksize: 13,
            scale: SCALE,
        }
    }
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(frame: &Frame, sigma: f64, ksize: usize) -> Result<Frame> {
    let t = gaussian_blur_tensor(frame.tensor(), sigma, ksize)?;
    // Convex combination of in-range values; clamp only absorbs rounding.
    Frame::from_tensor_clamped(t)
}

pub fn gaussian_blur_tensor(t: &Tensor, sigma: f64, ksize: usize) -> Result<Tensor> {
    let k = gaussian_kernel_1d(sigma, ksize)?;
    let (_, h, w) = t.chw();
    Ok(apply_separable(
        t,
        &Taps::convolve_reflect(w, &k),
        &Taps::convolve_reflect(h, &k),
    ))
}

/// Bicubic decimation by an integer factor; output clamped to `[0, 1]`.
pub fn bicubic_downsample(frame: &Frame, scale: usize) -> Result<Frame> {
    let (h, w) = frame.dims();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} is not divisible by scale {scale}; crop before downsampling"
        )));
    }
    Frame::from_tensor_clamped(resize_bicubic(frame.tensor(), h / scale, w / scale))
}

/// Bicubic enlargement by an integer factor, clamped to `[0, 1]`.
pub fn bicubic_upsample(frame: &Frame, scale: usize) -> Result<Frame> {
    if scale == 0 {
        return Err(Error::invalid("scale must be >= 1"));
    }
    let (h, w) = frame.dims();
    Frame::from_tensor_clamped(resize_bicubic(frame.tensor(), h * scale, w * scale))
}

pub fn degrade_frame(hr: &Frame, params: &DegradeParams) -> Result<Frame> {
    bicubic_downsample(&gaussian_blur(hr, params.sigma, params.ksize)?, params.scale)
}

/// Builds the LR counterpart of every HR frame.
pub fn degrade(hr: &VideoClip, params: &DegradeParams) -> Result<LrHrPair> {
    if params.scale != SCALE {
        return Err(Error::invalid(format!(
            "only x{SCALE} pairs are supported, got x{}",
            params.scale
        )));
    }
    let lr = hr
        .frames()
        .iter()
        .map(|f| degrade_frame(f, params))
        .collect::<Result<Vec<_>>>()?;
    LrHrPair::new(VideoClip::new(hr.scene_id(), lr)?, hr.clone())
}

/// Top-left LR offset `(x, y)` drawn for a crop; HR offset is `SCALE` times it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOffset {
    pub x: usize,
    pub y: usize,
}

pub fn draw_crop_offset(lr_dims: (usize, usize), lr_crop: usize, rng: &mut impl Rng) -> Result<CropOffset> {
    let (h, w) = lr_dims;
    if lr_crop == 0 || h < lr_crop || w < lr_crop {
        return Err(Error::invalid(format!(
            "lr clip {h}x{w} is smaller than crop {lr_crop}"
        )));
    }
    Ok(CropOffset {
        x: rng.random_range(0..=w - lr_crop),
        y: rng.random_range(0..=h - lr_crop),
    })
}

/// Crops the same window from every frame of the pair.
pub fn crop_pair_at(pair: &LrHrPair, lr_crop: usize, at: CropOffset) -> Result<LrHrPair> {
    let (h, w) = pair.lr().dims();
    if at.x + lr_crop > w || at.y + lr_crop > h {
        return Err(Error::invalid(format!(
            "crop {lr_crop} at ({}, {}) exceeds lr {h}x{w}",
            at.x, at.y
        )));
    }
    let hr_crop = lr_crop * SCALE;
    let lr = pair
        .lr()
        .frames()
        .iter()
        .map(|f| f.crop(at.y, at.x, lr_crop, lr_crop))
        .collect::<Result<Vec<_>>>()?;
    let hr = pair
        .hr()
        .frames()
        .iter()
        .map(|f| f.crop(at.y * SCALE, at.x * SCALE, hr_crop, hr_crop))
        .collect::<Result<Vec<_>>>()?;
    LrHrPair::new(
        VideoClip::new(pair.lr().scene_id(), lr)?,
        VideoClip::new(pair.hr().scene_id(), hr)?,
    )
}

/// Deterministic random aligned crop: `lr_crop^2` LR, `(4 lr_crop)^2` HR.
pub fn sample_crop(pair: &LrHrPair, lr_crop: usize, rng_seed: u64) -> Result<LrHrPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let at = draw_crop_offset(pair.lr().dims(), lr_crop, &mut rng)?;
    crop_pair_at(pair, lr_crop, at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn lcg_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut s = seed;
        Frame::from_fn(h, w, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    /// Direct 2-D convolution with an explicitly evaluated Gaussian and
    /// mirrored indices, independent of the separable tap machinery.
    fn blur_oracle(f: &Frame, sigma: f64, ksize: usize) -> Tensor {
        let r = (ksize / 2) as isize;
        let (h, w) = f.dims();
        let mut norm = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                norm += libm::exp(-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma));
            }
        }
        let mirror = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            while i < 0 || i >= n {
                if i < 0 {
                    i = -i;
                }
                if i >= n {
                    i = 2 * (n - 1) - i;
                }
            }
            i as usize
        };
        Tensor::from_fn_chw(3, h, w, |c, y, x| {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let wgt = libm::exp(-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)) / norm;
                    acc += wgt * f.at(c, mirror(y as isize + dy, h), mirror(x as isize + dx, w));
                }
            }
            acc
        })
    }

    #[test]
    fn blur_keeps_constants() {
        let f = Frame::constant(10, 7, 0.5).unwrap();
        for sigma in [0.3, 1.5, 4.0] {
            let b = gaussian_blur(&f, sigma, 9).unwrap();
            assert!(b.tensor().data().iter().all(|&v| (v - 0.5).abs() < 1e-14));
        }
    }

    #[test]
    fn blur_impulse_stamps_kernel() {
        let mut t = Tensor::zeros(&[3, 9, 9]);
        for c in 0..3 {
            t.set(c, 4, 4, 1.0);
        }
        let b = gaussian_blur(&Frame::new(t).unwrap(), 1.5, 5).unwrap();
        let mut norm = 0.0;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                norm += libm::exp(-((dx * dx + dy * dy) as f64) / (2.0 * 2.25));
            }
        }
        for y in 0..9 {
            for x in 0..9 {
                let (dy, dx) = (y as i32 - 4, x as i32 - 4);
                let expect = if dy.abs() <= 2 && dx.abs() <= 2 {
                    libm::exp(-((dx * dx + dy * dy) as f64) / 4.5) / norm
                } else {
                    0.0
                };
                assert!((b.at(1, y, x) - expect).abs() < 1e-14, "({y},{x})");
            }
        }
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let f = lcg_frame(11, 6, 3);
        let b = gaussian_blur(&f, 1.2, 7).unwrap();
        assert!(b.tensor().max_abs_diff(&blur_oracle(&f, 1.2, 7)) < 1e-12);
    }

    #[test]
    fn blur_semigroup() {
        let f = lcg_frame(16, 16, 11);
        let twice = gaussian_blur(&gaussian_blur(&f, 1.5, 31).unwrap(), 1.5, 31).unwrap();
        let once = gaussian_blur(&f, 1.5 * core::f64::consts::SQRT_2, 41).unwrap();
        for c in 0..3 {
            for y in 4..12 {
                for x in 4..12 {
                    assert!((twice.at(c, y, x) - once.at(c, y, x)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let f = lcg_frame(64, 64, 5);
        let b = gaussian_blur(&f, 1.5, 13).unwrap();
        let d = (b.tensor().mean() - f.tensor().mean()).abs();
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn blur_rejects_bad_args() {
        let f = Frame::constant(4, 4, 0.1).unwrap();
        assert!(matches!(gaussian_blur(&f, 1.0, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(gaussian_blur(&f, 0.0, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn downsample_constant_and_shape() {
        let f = Frame::constant(64, 64, 0.3).unwrap();
        let d = bicubic_downsample(&f, 4).unwrap();
        assert_eq!(d.dims(), (16, 16));
        assert!(d.tensor().data().iter().all(|&v| (v - 0.3).abs() < 1e-14));
        assert!(bicubic_downsample(&Frame::constant(63, 64, 0.3).unwrap(), 4).is_err());
    }

    #[test]
    fn downsample_ramp_matches_kernel_sum() {
        // Horizontal ramp; oracle evaluates the cubic kernel per output pixel.
        let f = Frame::from_fn(16, 32, |_, _, x| x as f64 / 31.0).unwrap();
        let d = bicubic_downsample(&f, 4).unwrap();
        let k = |t: f64| crate::resample::cubic_kernel(t, -0.5);
        for ox in 1..7 {
            let u = (ox as f64 + 0.5) * 4.0 - 0.5;
            let mut acc = 0.0;
            for j in (libm::floor(u) as i64 - 1)..=(libm::floor(u) as i64 + 2) {
                acc += k(u - j as f64) * (j as f64 / 31.0);
            }
            for oy in 0..4 {
                assert!((d.at(0, oy, ox) - acc).abs() < 1e-12);
            }
            // A ramp stays a ramp: value equals the ramp at the sample center.
            assert!((acc - u / 31.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degrade_shapes_and_constants() {
        let hr = VideoClip::new(
            "s",
            vec![Frame::constant(128, 128, 0.6).unwrap(); 3],
        )
        .unwrap();
        let pair = degrade(&hr, &DegradeParams::default()).unwrap();
        assert_eq!(pair.lr().len(), 3);
        assert_eq!(pair.lr().dims(), (32, 32));
        for f in pair.lr().frames() {
            assert!(f.tensor().data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
        }
    }

    #[test]
    fn degrade_checkerboard_composes_oracles() {
        let hr = Frame::from_fn(32, 32, |c, y, x| if ((y / 2) + (x / 2) + c) % 2 == 0 { 0.9 } else { 0.1 }).unwrap();
        let params = DegradeParams { sigma: 1.5, ksize: 7, scale: 4 };
        let lr = degrade_frame(&hr, &params).unwrap();
        let blurred = blur_oracle(&hr, 1.5, 7);
        let k = |t: f64| crate::resample::cubic_kernel(t, -0.5);
        for c in 0..3 {
            for oy in 0..8 {
                for ox in 0..8 {
                    let (uy, ux) = ((oy as f64 + 0.5) * 4.0 - 0.5, (ox as f64 + 0.5) * 4.0 - 0.5);
                    let mut acc = 0.0;
                    for jy in -1..=2i64 {
                        for jx in -1..=2i64 {
                            let sy = libm::floor(uy) as i64 + jy;
                            let sx = libm::floor(ux) as i64 + jx;
                            let v = blurred.at(c, sy.clamp(0, 31) as usize, sx.clamp(0, 31) as usize);
                            acc += k(uy - sy as f64) * k(ux - sx as f64) * v;
                        }
                    }
                    assert!((lr.at(c, oy, ox) - acc.clamp(0.0, 1.0)).abs() < 1e-12);
                }
            }
        }
    }

    fn pair_from_hr(hr: Vec<Frame>) -> LrHrPair {
        degrade(&VideoClip::new("p", hr).unwrap(), &DegradeParams::default()).unwrap()
    }

    #[test]
    fn crop_is_deterministic_and_aligned() {
        let hr: Vec<Frame> = (0..2).map(|i| lcg_frame(160, 192, i)).collect();
        let pair = pair_from_hr(hr);
        let a = sample_crop(&pair, 32, 42).unwrap();
        let b = sample_crop(&pair, 32, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lr().dims(), (32, 32));
        assert_eq!(a.hr().dims(), (128, 128));

        let at = CropOffset { x: 3, y: 5 };
        let c = crop_pair_at(&pair, 4, at).unwrap();
        assert_eq!(c.hr().frames()[0], pair.hr().frames()[0].crop(20, 12, 16, 16).unwrap());
        assert_eq!(c.lr().frames()[1], pair.lr().frames()[1].crop(5, 3, 4, 4).unwrap());
    }

    #[test]
    fn full_size_crop_is_identity() {
        let pair = pair_from_hr(vec![lcg_frame(32, 32, 1)]);
        let c = sample_crop(&pair, 8, 7).unwrap();
        assert_eq!(c, pair);
        assert!(sample_crop(&pair, 9, 7).is_err());
    }
}
