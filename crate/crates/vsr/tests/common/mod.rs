#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use vsr::imageio::write_clip_dir;
use vsr_core::synthetic::MovingPattern;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn vsr(args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_vsr")).args(args).output().expect("binary runs");
    Output {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Raw HR scene tree `root/<name>/00000.png ...` of moving patterns.
pub fn raw_tree(root: &Path, names: &[&str], h: usize, w: usize, frames: usize) {
    for (i, n) in names.iter().enumerate() {
        let clip = MovingPattern { seed: i as u64 + 1, ..MovingPattern::new(h, w, frames) }.clip(n).unwrap();
        write_clip_dir(&root.join(n), &clip).unwrap();
    }
}

/// A tiny, fast configuration over `dataset`.
pub fn write_config(path: &Path, dataset: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "preset = rbpn_only\nn_neighbors = 2\nbase_channels = 8\nn_residual_blocks = 1\nbatch_size = 1\ncrop = 6\n\
         clip_frames = 2\ntotal_steps = 4\nflow_width = 8\nflow_levels = 2\ndataset = {}\nlog_wall_time = false\n\
         checkpoint_every = 2\n{extra}",
        dataset.display()
    );
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

pub fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
