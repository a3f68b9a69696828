//! Binary flow rasters: `u32` LE height, `u32` LE width, then row-major
//! `f32` LE `(dx, dy)` pairs.

use std::fs;
use std::path::Path;

use vsr_core::flow::FlowField;
use vsr_core::Tensor;

use crate::error::{IoContext, Result, VsrError};

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.dims();
    let mut out = Vec::with_capacity(8 + h * w * 8);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&(flow.dx(y, x) as f32).to_le_bytes());
            out.extend_from_slice(&(flow.dy(y, x) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> std::result::Result<FlowField, String> {
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if bytes.len() < 8 {
        return Err("truncated header".into());
    }
    let (h, w) = (word(0) as usize, word(4) as usize);
    let want = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(8))
        .ok_or("dimensions overflow")?;
    if bytes.len() != want {
        return Err(format!("expected {want} bytes for {h}x{w}, found {}", bytes.len()));
    }
    let mut t = Tensor::zeros(&[2, h, w]);
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        let at = 8 + i * 8;
        let dx = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let dy = f32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap());
        t.set(0, y, x, dx as f64);
        t.set(1, y, x, dy as f64);
    }
    FlowField::new(t).map_err(|e| e.to_string())
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flow(flow)).at(path)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).at(path)?;
    decode_flow(&bytes).map_err(|m| VsrError::format(path, m))
}
