//! Frames, clips and aligned LR/HR clip pairs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SCALE;

/// An RGB raster with values in `[0, 1]`, stored as a `[3, h, w]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Tensor);

impl Frame {
    /// Validates shape, channel count and value range.
    pub fn new(t: Tensor) -> Result<Self> {
        if !t.is_chw() {
            return Err(Error::shape(format!("frame must be [3, h, w], got {:?}", t.shape())));
        }
        let (c, h, w) = t.chw();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::shape(format!("frame must be [3, h>=1, w>=1], got {:?}", t.shape())));
        }
        if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("frame value {bad} outside [0, 1]")));
        }
        Ok(Frame(t))
    }

    /// Clamps every value into `[0, 1]` (non-finite values become 0).
    pub fn from_tensor_clamped(t: Tensor) -> Result<Self> {
        let t = t.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Frame::new(t)
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        Frame::new(Tensor::full(&[3, h, w], value))
    }

    pub fn from_fn(h: usize, w: usize, f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        Frame::new(Tensor::from_fn_chw(3, h, w, f))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at(c, y, x)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Frame(self.0.crop(y0, x0, h, w)?))
    }

    /// Rounds to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantize_8bit(&self) -> Self {
        Frame(self.0.map(|v| libm::round(v * 255.0) / 255.0))
    }
}

/// An ordered, dimensionally homogeneous frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    scene_id: String,
}

impl VideoClip {
    pub fn new(scene_id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("a clip needs at least one frame"))?;
        let dims = first.dims();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
            return Err(Error::shape(format!(
                "frame {i} is {:?}, clip frames are {dims:?}",
                f.dims()
            )));
        }
        Ok(VideoClip {
            frames,
            scene_id: scene_id.into(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Frames `[start, start + len)` as a new clip with the same scene id.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames.len() {
            return Err(Error::invalid(format!(
                "window {start}+{len} out of a {}-frame clip",
                self.frames.len()
            )));
        }
        VideoClip::new(self.scene_id.clone(), self.frames[start..start + len].to_vec())
    }
}

/// A low-resolution clip and its exactly 4x high-resolution counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct LrHrPair {
    lr: VideoClip,
    hr: VideoClip,
}

impl LrHrPair {
    pub fn new(lr: VideoClip, hr: VideoClip) -> Result<Self> {
        if lr.len() != hr.len() {
            return Err(Error::shape(format!(
                "lr has {} frames, hr has {}",
                lr.len(),
                hr.len()
            )));
        }
        if lr.scene_id() != hr.scene_id() {
            return Err(Error::invalid(format!(
                "scene ids differ: {} vs {}",
                lr.scene_id(),
                hr.scene_id()
            )));
        }
        let (lh, lw) = lr.dims();
        let (hh, hw) = hr.dims();
        if hh != lh * SCALE || hw != lw * SCALE {
            return Err(Error::shape(format!(
                "hr {hh}x{hw} is not {SCALE}x lr {lh}x{lw}"
            )));
        }
        Ok(LrHrPair { lr, hr })
    }

    pub fn lr(&self) -> &VideoClip {
        &self.lr
    }

    pub fn hr(&self) -> &VideoClip {
        &self.hr
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        LrHrPair::new(self.lr.window(start, len)?, self.hr.window(start, len)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn frame_rejects_out_of_range_and_bad_channels() {
        assert!(Frame::new(Tensor::full(&[3, 2, 2], 1.5)).is_err());
        assert!(Frame::new(Tensor::full(&[1, 2, 2], 0.5)).is_err());
        assert!(Frame::new(Tensor::full(&[3, 0, 2], 0.5)).is_err());
        assert!(Frame::new(Tensor::full(&[3, 2, 2], 1.0)).is_ok());
    }

    #[test]
    fn clip_requires_homogeneous_dims() {
        let a = Frame::constant(4, 4, 0.1).unwrap();
        let b = Frame::constant(4, 5, 0.1).unwrap();
        assert!(VideoClip::new("s", vec![a.clone(), b]).is_err());
        assert!(VideoClip::new("s", vec![]).is_err());
        assert_eq!(VideoClip::new("s", vec![a.clone(), a]).unwrap().len(), 2);
    }

    #[test]
    fn pair_enforces_scale() {
        let lr = VideoClip::new("s", vec![Frame::constant(2, 3, 0.2).unwrap()]).unwrap();
        let hr = VideoClip::new("s", vec![Frame::constant(8, 12, 0.2).unwrap()]).unwrap();
        let bad = VideoClip::new("s", vec![Frame::constant(8, 11, 0.2).unwrap()]).unwrap();
        assert!(LrHrPair::new(lr.clone(), hr).is_ok());
        assert!(LrHrPair::new(lr, bad).is_err());
    }

    #[test]
    fn quantize_hits_8bit_levels() {
        let f = Frame::constant(1, 1, 0.5).unwrap().quantize_8bit();
        assert_eq!(f.at(0, 0, 0), 128.0 / 255.0);
    }
}
