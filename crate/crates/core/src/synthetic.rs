//! Deterministic synthetic clips for fixtures and smoke runs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::frame::{Frame, VideoClip};

/// A smooth colour texture translating by `velocity` px per frame
/// (`(dx, dy)`; content moves right/down for positive values).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingPattern {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub velocity: (f64, f64),
    /// Shifts the texture phase; different seeds give different clips.
    pub seed: u64,
}

impl MovingPattern {
    pub fn new(height: usize, width: usize, frames: usize) -> Self {
        MovingPattern { height, width, frames, velocity: (1.5, -0.5), seed: 0 }
    }

    pub fn value(&self, c: usize, y: f64, x: f64, t: usize) -> f64 {
        let tau = core::f64::consts::TAU;
        let phase = (self.seed % 997) as f64 * 0.37;
        let xs = x - self.velocity.0 * t as f64;
        let ys = y - self.velocity.1 * t as f64;
        let v = 0.5
            + 0.2 * libm::sin(tau * xs / 14.0 + c as f64 + phase) * libm::cos(tau * ys / 19.0)
            + 0.15 * libm::sin(tau * (xs + ys) / 23.0 + 2.0 * phase);
        v.clamp(0.0, 1.0)
    }

    pub fn clip(&self, scene_id: &str) -> Result<VideoClip> {
        let frames = (0..self.frames)
            .map(|t| Frame::from_fn(self.height, self.width, |c, y, x| self.value(c, y as f64, x as f64, t)))
            .collect::<Result<Vec<_>>>()?;
        VideoClip::new(scene_id, frames)
    }
}

/// `count` scenes named `scene000`, `scene001`, ... with distinct seeds.
pub fn scenes(count: usize, height: usize, width: usize, frames: usize) -> Result<Vec<VideoClip>> {
    (0..count)
        .map(|i| {
            let p = MovingPattern { seed: i as u64 + 1, ..MovingPattern::new(height, width, frames) };
            p.clip(&format!("scene{i:03}"))
        })
        .collect()
}
