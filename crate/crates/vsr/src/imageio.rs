//! 8-bit PNG frames and directories of them.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader, RgbImage};
use vsr_core::{Frame, VideoClip};

use crate::error::{IoContext, Result, VsrError};

pub fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn frame_from_rgb8(img: &RgbImage) -> Result<Frame> {
    let (w, h) = img.dimensions();
    Ok(Frame::from_fn(h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })?)
}

pub fn frame_to_rgb8(frame: &Frame) -> RgbImage {
    let (h, w) = frame.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (frame.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn read_png(path: &Path) -> Result<Frame> {
    let reader = ImageReader::open(path).at(path)?;
    let img = reader
        .with_guessed_format()
        .at(path)?
        .decode()
        .map_err(|e| VsrError::Image { path: path.to_path_buf(), message: e.to_string() })?;
    frame_from_rgb8(&img.to_rgb8())
}

pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    frame_to_rgb8(frame)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| VsrError::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// PNG files directly inside `dir`, in lexicographic filename order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_file() && is_png(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_frames(paths: &[PathBuf], scene_id: &str) -> Result<VideoClip> {
    let mut frames = Vec::with_capacity(paths.len());
    let mut dims = None;
    for p in paths {
        let f = read_png(p)?;
        match dims {
            None => dims = Some(f.dims()),
            Some(d) if d != f.dims() => {
                return Err(VsrError::format(p, format!("frame is {:?}, scene {scene_id} started at {d:?}", f.dims())));
            }
            _ => {}
        }
        frames.push(f);
    }
    if frames.is_empty() {
        return Err(VsrError::Data(format!("scene {scene_id} has no frames")));
    }
    Ok(VideoClip::new(scene_id, frames)?)
}

pub fn read_clip_dir(dir: &Path, scene_id: &str) -> Result<VideoClip> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(VsrError::format(dir, "no PNG frames"));
    }
    read_frames(&paths, scene_id)
}

/// Writes `clip` as `00000.png`, `00001.png`, ... into `dir`.
pub fn write_clip_dir(dir: &Path, clip: &VideoClip) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).at(dir)?;
    clip.frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("{i:05}.png"));
            write_png(&p, f)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes_map_to_unit_interval() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { image::Rgb([0, 0, 0]) } else { image::Rgb([255, 255, 255]) });
        let f = frame_from_rgb8(&img).unwrap();
        assert_eq!(f.at(0, 0, 0), 0.0);
        assert_eq!(f.at(2, 0, 1), 1.0);
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::from_fn(5, 7, |c, y, x| ((c * 31 + y * 7 + x * 13) % 97) as f64 / 96.0).unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &f).unwrap();
        let g = read_png(&p).unwrap();
        assert!(f.tensor().max_abs_diff(g.tensor()) <= 0.5 / 255.0 + 1e-12);
    }
}
