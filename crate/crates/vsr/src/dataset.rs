//! Scene discovery, prepared LR/HR trees and their manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vsr_core::dataio::{degrade, DegradeParams};
use vsr_core::{LrHrPair, VideoClip};

use crate::error::{IoContext, Result, VsrError};
use crate::imageio::{list_frames, read_frames, write_png};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_TAG: &str = "vsr-prepared/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `root/<scene>/*.png`
    FlatSceneDirs,
    /// `root/[sequences/]<group>/<clip>/*.png`
    Septuplet,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::FlatSceneDirs => "flat-scene-dirs",
            Layout::Septuplet => "septuplet",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = VsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" | "flat-scene-dirs" => Ok(Layout::FlatSceneDirs),
            "septuplet" => Ok(Layout::Septuplet),
            _ => Err(VsrError::Config(format!("unknown layout {s:?} (flat-scene-dirs | septuplet)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub scene_id: String,
    pub frames: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub layout: Layout,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn scene(&self, scene_id: &str) -> Option<&SceneEntry> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn scene_ids(&self) -> Vec<&str> {
        self.scenes.iter().map(|s| s.scene_id.as_str()).collect()
    }
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let p = entry.at(dir)?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Picks the layout from what is on disk. A directory holding PNGs directly
/// is read as a single flat scene.
pub fn detect_layout(root: &Path) -> Result<Layout> {
    if root.join("sequences").is_dir() {
        return Ok(Layout::Septuplet);
    }
    let dirs = subdirs(root)?;
    let mut nested = false;
    for d in &dirs {
        if !list_frames(d)?.is_empty() {
            return Ok(Layout::FlatSceneDirs);
        }
        for dd in subdirs(d)? {
            nested |= !list_frames(&dd)?.is_empty();
        }
    }
    Ok(if nested { Layout::Septuplet } else { Layout::FlatSceneDirs })
}

pub fn load_manifest(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(VsrError::format(root, "not a directory"));
    }
    let mut scenes = Vec::new();
    match layout {
        Layout::FlatSceneDirs => {
            for d in subdirs(root)? {
                let frames = list_frames(&d)?;
                if !frames.is_empty() {
                    scenes.push(SceneEntry { scene_id: file_name(&d), frames });
                }
            }
            if scenes.is_empty() {
                let frames = list_frames(root)?;
                if !frames.is_empty() {
                    scenes.push(SceneEntry { scene_id: file_name(root), frames });
                }
            }
        }
        Layout::Septuplet => {
            let base = if root.join("sequences").is_dir() { root.join("sequences") } else { root.to_path_buf() };
            for group in subdirs(&base)? {
                for clip in subdirs(&group)? {
                    let frames = list_frames(&clip)?;
                    if !frames.is_empty() {
                        scenes.push(SceneEntry { scene_id: format!("{}/{}", file_name(&group), file_name(&clip)), frames });
                    }
                }
            }
        }
    }
    if scenes.is_empty() {
        return Err(VsrError::format(root, format!("no PNG scenes found ({layout} layout)")));
    }
    Ok(DatasetManifest { root: root.to_path_buf(), layout, scenes })
}

pub fn discover(root: &Path) -> Result<DatasetManifest> {
    load_manifest(root, detect_layout(root)?)
}

pub fn load_clip(manifest: &DatasetManifest, scene_id: &str) -> Result<VideoClip> {
    let entry = manifest
        .scene(scene_id)
        .ok_or_else(|| VsrError::Data(format!("scene {scene_id:?} not in {}", manifest.root.display())))?;
    read_frames(&entry.frames, scene_id)
}

pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<VideoClip>> {
    manifest.scenes.iter().map(|s| read_frames(&s.frames, &s.scene_id)).collect()
}

/// One line of a prepared tree's manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub scene_id: String,
    pub frame_count: usize,
    pub hr_dims: (usize, usize),
    pub lr_dims: (usize, usize),
    pub params: DegradeParams,
}

fn dims_str((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

fn parse_dims(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    Some((h.parse().ok()?, w.parse().ok()?))
}

pub fn render_manifest(layout: Layout, records: &[PreparedRecord]) -> String {
    let mut s = format!("# {MANIFEST_TAG} layout={layout}\n# scene_id\tframe_count\thr_dims\tlr_dims\tsigma\tksize\tscale\n");
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.scene_id,
            r.frame_count,
            dims_str(r.hr_dims),
            dims_str(r.lr_dims),
            r.params.sigma,
            r.params.ksize,
            r.params.scale
        ));
    }
    s
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<(Layout, Vec<PreparedRecord>)> {
    let bad = |line: usize, what: &str| VsrError::format(path, format!("line {line}: {what}"));
    let mut layout = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some(l) = rest.strip_prefix(MANIFEST_TAG).and_then(|r| r.trim().strip_prefix("layout=")) {
                layout = Some(l.parse()?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(n, "expected 7 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad integer"));
        records.push(PreparedRecord {
            scene_id: f[0].to_string(),
            frame_count: num(f[1])?,
            hr_dims: parse_dims(f[2]).ok_or_else(|| bad(n, "bad hr dims"))?,
            lr_dims: parse_dims(f[3]).ok_or_else(|| bad(n, "bad lr dims"))?,
            params: DegradeParams {
                sigma: f[4].parse().map_err(|_| bad(n, "bad sigma"))?,
                ksize: num(f[5])?,
                scale: num(f[6])?,
            },
        });
    }
    let layout = layout.ok_or_else(|| VsrError::format(path, format!("missing '# {MANIFEST_TAG}' header")))?;
    Ok((layout, records))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrepareSummary {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
    pub manifest_rewritten: bool,
}

fn scene_dir(base: &Path, scene_id: &str) -> PathBuf {
    scene_id.split('/').fold(base.to_path_buf(), |p, part| p.join(part))
}

/// Crops the bottom/right remainder so both dims divide by `scale`.
pub fn crop_to_multiple(clip: &VideoClip, scale: usize) -> Result<VideoClip> {
    let (h, w) = clip.dims();
    let (ch, cw) = (h - h % scale, w - w % scale);
    if ch == 0 || cw == 0 {
        return Err(VsrError::Data(format!("scene {} is {h}x{w}, smaller than scale {scale}", clip.scene_id())));
    }
    if (ch, cw) == (h, w) {
        return Ok(clip.clone());
    }
    let frames = clip.frames().iter().map(|f| f.crop(0, 0, ch, cw)).collect::<vsr_core::Result<Vec<_>>>()?;
    Ok(VideoClip::new(clip.scene_id(), frames)?)
}

/// Degrades every scene of `input` into `output/HR` and `output/LR`.
/// Scenes whose outputs already exist with the same parameters are left
/// untouched unless `force` is set.
pub fn prepare(input: &Path, output: &Path, layout: Option<Layout>, params: DegradeParams, force: bool) -> Result<PrepareSummary> {
    let manifest = match layout {
        Some(l) => load_manifest(input, l)?,
        None => discover(input)?,
    };
    let manifest_path = output.join(MANIFEST_FILE);
    let previous_text = fs::read_to_string(&manifest_path).ok();
    let previous: BTreeMap<String, PreparedRecord> = match &previous_text {
        Some(t) => parse_manifest(&manifest_path, t)?.1.into_iter().map(|r| (r.scene_id.clone(), r)).collect(),
        None => BTreeMap::new(),
    };
    let hr_root = output.join("HR");
    let lr_root = output.join("LR");
    let mut summary = PrepareSummary::default();
    let mut records = Vec::new();
    for scene in &manifest.scenes {
        let names: Vec<String> = scene.frames.iter().map(|p| file_name(p)).collect();
        let hr_dir = scene_dir(&hr_root, &scene.scene_id);
        let lr_dir = scene_dir(&lr_root, &scene.scene_id);
        let complete = names.iter().all(|n| hr_dir.join(n).is_file() && lr_dir.join(n).is_file());
        if !force && complete {
            if let Some(prev) = previous.get(&scene.scene_id) {
                if prev.params != params || prev.frame_count != names.len() {
                    return Err(VsrError::Data(format!(
                        "{} was prepared with different settings; rerun with --force",
                        hr_dir.display()
                    )));
                }
                records.push(prev.clone());
                summary.skipped.push(scene.scene_id.clone());
                continue;
            }
        }
        let hr = crop_to_multiple(&read_frames(&scene.frames, &scene.scene_id)?, params.scale)?;
        let pair = degrade(&hr, &params)?;
        for (i, n) in names.iter().enumerate() {
            write_png(&hr_dir.join(n), &pair.hr().frames()[i])?;
            write_png(&lr_dir.join(n), &pair.lr().frames()[i])?;
        }
        records.push(PreparedRecord {
            scene_id: scene.scene_id.clone(),
            frame_count: names.len(),
            hr_dims: pair.hr().dims(),
            lr_dims: pair.lr().dims(),
            params,
        });
        summary.written.push(scene.scene_id.clone());
    }
    let text = render_manifest(manifest.layout, &records);
    if previous_text.as_deref() != Some(text.as_str()) {
        fs::create_dir_all(output).at(output)?;
        fs::write(&manifest_path, &text).at(&manifest_path)?;
        summary.manifest_rewritten = true;
    }
    Ok(summary)
}

pub fn is_prepared(root: &Path) -> bool {
    root.join(MANIFEST_FILE).is_file() && root.join("HR").is_dir() && root.join("LR").is_dir()
}

/// Reads the records of a prepared tree.
pub fn prepared_records(root: &Path) -> Result<(Layout, Vec<PreparedRecord>)> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    parse_manifest(&path, &text)
}

fn load_side(base: &Path, r: &PreparedRecord, dims: (usize, usize)) -> Result<VideoClip> {
    let dir = scene_dir(base, &r.scene_id);
    let frames = list_frames(&dir)?;
    if frames.len() != r.frame_count {
        return Err(VsrError::format(&dir, format!("manifest lists {} frames, found {}", r.frame_count, frames.len())));
    }
    let clip = read_frames(&frames, &r.scene_id)?;
    if clip.dims() != dims {
        return Err(VsrError::format(&dir, format!("frames are {:?}, manifest says {dims:?}", clip.dims())));
    }
    Ok(clip)
}

/// Loads every LR/HR pair of a prepared tree, in manifest order.
pub fn load_prepared(root: &Path) -> Result<Vec<LrHrPair>> {
    let (_, records) = prepared_records(root)?;
    records
        .iter()
        .map(|r| {
            let hr = load_side(&root.join("HR"), r, r.hr_dims)?;
            let lr = load_side(&root.join("LR"), r, r.lr_dims)?;
            Ok(LrHrPair::new(lr, hr)?)
        })
        .collect()
}

/// A prepared tree as is, or a raw HR tree degraded in memory.
pub fn load_pairs(root: &Path, params: DegradeParams) -> Result<Vec<LrHrPair>> {
    if is_prepared(root) {
        return load_prepared(root);
    }
    let manifest = discover(root)?;
    load_all(&manifest)?
        .iter()
        .map(|c| Ok(degrade(&crop_to_multiple(c, params.scale)?, &params)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trips() {
        let r = PreparedRecord {
            scene_id: "00001/0002".into(),
            frame_count: 7,
            hr_dims: (256, 448),
            lr_dims: (64, 112),
            params: DegradeParams::default(),
        };
        let text = render_manifest(Layout::Septuplet, std::slice::from_ref(&r));
        let (layout, back) = parse_manifest(Path::new("m"), &text).unwrap();
        assert_eq!(layout, Layout::Septuplet);
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn manifest_without_header_is_rejected() {
        assert!(parse_manifest(Path::new("m"), "a\t1\t4x4\t1x1\t1.5\t13\t4\n").is_err());
    }
}
