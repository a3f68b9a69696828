//! Dense row-major `f64` tensors.
//!
//! Feature maps and frames are `[channels, height, width]`; convolution
//! weights are `[out, in, k, k]` (or `[in, out, k, k]` for transposed
//! convolutions); per-channel vectors are `[c]`; scalars are `[1]`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(alloc::format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a `[c, h, w]` tensor from a per-element function.
    pub fn from_fn_chw(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Tensor {
            shape: vec![c, h, w],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    ///
    /// Panics on other ranks; every caller in this crate validates rank first.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [c, h, w] tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn is_chw(&self) -> bool {
        self.shape.len() == 3
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Contiguous slice holding one channel plane of a `[c, h, w]` tensor.
    pub fn plane(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let (_, h, w) = self.chw();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(alloc::format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        crate::error::ensure_same_shape("zip_map", &self.shape, &other.shape)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (_, h, w) = first.chw();
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            if !p.is_chw() || p.shape[1] != h || p.shape[2] != w {
                return Err(Error::shape(alloc::format!(
                    "concat: {:?} vs spatial {h}x{w}",
                    p.shape
                )));
            }
            c_total += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![c_total, h, w],
            data,
        })
    }

    /// Channels `[start, start + count)` of a rank-3 tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let (c, h, w) = self.chw();
        if start + count > c {
            return Err(Error::invalid(alloc::format!(
                "channel slice {start}+{count} out of {c}"
            )));
        }
        let plane = h * w;
        Ok(Tensor {
            shape: vec![count, h, w],
            data: self.data[start * plane..(start + count) * plane].to_vec(),
        })
    }

    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of a rank-3 tensor.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (c, sh, sw) = self.chw();
        if y0 + h > sh || x0 + w > sw {
            return Err(Error::invalid(alloc::format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {sh}x{sw}"
            )));
        }
        Ok(Tensor::from_fn_chw(c, h, w, |ci, y, x| self.at(ci, y0 + y, x0 + x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_len() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let a = Tensor::from_fn_chw(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let b = Tensor::full(&[1, 3, 4], -1.0);
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[3, 3, 4]);
        assert_eq!(cat.channel_slice(0, 2).unwrap(), a);
        assert_eq!(cat.channel_slice(2, 1).unwrap(), b);
        assert!(cat.channel_slice(2, 2).is_err());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 3, 4]);
        let b = Tensor::zeros(&[1, 4, 4]);
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn crop_window() {
        let a = Tensor::from_fn_chw(1, 5, 5, |_, y, x| (y * 5 + x) as f64);
        let c = a.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.data(), &[7.0, 8.0, 9.0, 12.0, 13.0, 14.0]);
        assert!(a.crop(4, 4, 2, 2).is_err());
    }
}
