#![allow(dead_code)]

use vsr_core::graph::Graph;
use vsr_core::trainer::TrainConfig;
use vsr_core::{Frame, Tensor};

pub fn lcg_values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

pub fn noise_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, lcg_values(n, seed)).unwrap()
}

pub fn noise_frame(h: usize, w: usize, seed: u64) -> Frame {
    Frame::new(noise_tensor(&[3, h, w], seed)).unwrap()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = v - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = v;
        out.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    out
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).unwrap().norm();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Analytic gradient of a graph-built scalar with respect to one input.
pub fn tape_grad(x: &Tensor, build: impl Fn(&mut Graph, vsr_core::graph::Var) -> vsr_core::graph::Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.tracked(x.clone());
    let loss = build(&mut g, v);
    g.backward(loss).wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
}

/// A small configuration of any preset that trains in milliseconds.
pub fn mini_config(preset: &str, extra: &[(&str, &str)]) -> TrainConfig {
    let mut kv: Vec<(&str, &str)> = vec![
        ("preset", preset),
        ("base_channels", "8"),
        ("n_residual_blocks", "1"),
        ("batch_size", "1"),
        ("crop", "6"),
        ("clip_frames", "3"),
        ("disc_widths", "8,8,8,8"),
        ("flow_width", "8"),
        ("flow_levels", "2"),
        ("total_steps", "8"),
    ];
    for (k, v) in extra {
        kv.retain(|(q, _)| q != k);
        kv.push((k, v));
    }
    TrainConfig::resolve(&kv).unwrap()
}
