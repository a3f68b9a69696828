//! Inference over scene trees, metric evaluation and the bicubic baseline.

use std::fs;
use std::path::{Path, PathBuf};

use vsr_core::dataio::{bicubic_upsample, degrade, DegradeParams};
use vsr_core::flow::ClassicalFlow;
use vsr_core::metrics::{evaluate, EvalSettings, FeatureBackbone, MetricReport, ProtocolConfig, RandomPyramid};
use vsr_core::trainer::Models;
use vsr_core::{Frame, Tensor, VideoClip, SCALE};

use crate::checkpoint::Checkpoint;
use crate::dataset::{crop_to_multiple, discover, is_prepared, load_all, load_prepared};
use crate::error::{IoContext, Result, VsrError};
use crate::imageio::write_png;

/// How a report measures perceptual distance.
pub enum Backbone {
    Surrogate(RandomPyramid),
}

impl Backbone {
    pub fn surrogate() -> Self {
        Backbone::Surrogate(RandomPyramid::new(RandomPyramid::DEFAULT_SEED))
    }

    /// Weights as JSON `[[name, tensor], ...]`, named like the surrogate's.
    pub fn from_weights_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let named: Vec<(String, Tensor)> =
            serde_json::from_str(&text).map_err(|e| VsrError::format(path, e.to_string()))?;
        Ok(Backbone::Surrogate(RandomPyramid::with_weights(&named).map_err(|e| VsrError::format(path, e.to_string()))?))
    }

    pub fn as_dyn(&self) -> &dyn FeatureBackbone {
        match self {
            Backbone::Surrogate(p) => p,
        }
    }
}

pub struct EvalOptions {
    pub protocol: ProtocolConfig,
    pub backbone: Backbone,
    pub model: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { protocol: ProtocolConfig::default(), backbone: Backbone::surrogate(), model: "model".into() }
    }
}

impl EvalOptions {
    fn settings(&self) -> EvalSettings<'_> {
        EvalSettings {
            protocol: self.protocol,
            backbone: self.backbone.as_dyn(),
            flow: ClassicalFlow::default(),
            model: self.model.clone(),
        }
    }
}

/// Ground-truth clips: the `HR` side of a prepared tree, or any scene tree.
pub fn load_gt(root: &Path) -> Result<Vec<VideoClip>> {
    if is_prepared(root) {
        Ok(load_prepared(root)?.into_iter().map(|p| p.hr().clone()).collect())
    } else {
        load_all(&discover(root)?)
    }
}

pub fn evaluate_clips(gen: &[VideoClip], gt: &[VideoClip], opts: &EvalOptions) -> Result<MetricReport> {
    Ok(evaluate(gen, gt, &opts.settings())?)
}

pub fn evaluate_dirs(gen: &Path, gt: &Path, opts: &EvalOptions) -> Result<MetricReport> {
    let gen = load_all(&discover(gen)?)?;
    evaluate_clips(&gen, &load_gt(gt)?, opts)
}

/// Bicubic x4 enlargement of every LR frame, rounded to 8 bits as if saved.
pub fn bicubic_clip(lr: &VideoClip) -> Result<VideoClip> {
    let frames = lr
        .frames()
        .iter()
        .map(|f| Ok(bicubic_upsample(f, SCALE)?.quantize_8bit()))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoClip::new(lr.scene_id(), frames)?)
}

/// LR inputs and ground truth for the baseline. A prepared tree supplies
/// both; a raw tree is degraded here, with LR rounded to 8 bits.
pub fn baseline_inputs(root: &Path, params: DegradeParams) -> Result<(Vec<VideoClip>, Vec<VideoClip>)> {
    if is_prepared(root) {
        let pairs = load_prepared(root)?;
        return Ok(pairs.into_iter().map(|p| (p.lr().clone(), p.hr().clone())).unzip());
    }
    let mut lrs = Vec::new();
    let mut gts = Vec::new();
    for clip in load_all(&discover(root)?)? {
        let hr = crop_to_multiple(&clip, params.scale)?;
        let pair = degrade(&hr, &params)?;
        let lr: Vec<Frame> = pair.lr().frames().iter().map(Frame::quantize_8bit).collect();
        lrs.push(VideoClip::new(hr.scene_id(), lr)?);
        gts.push(hr);
    }
    Ok((lrs, gts))
}

pub fn baseline(root: &Path, params: DegradeParams, opts: &EvalOptions) -> Result<MetricReport> {
    let (lrs, gts) = baseline_inputs(root, params)?;
    let gen = lrs.iter().map(bicubic_clip).collect::<Result<Vec<_>>>()?;
    evaluate_clips(&gen, &gts, opts)
}

/// Per-frame rows of a report.
pub fn report_csv(r: &MetricReport) -> String {
    let mut s = String::from("model,scene,frame,psnr_db,ssim,lpips,lpips_x10,tof\n");
    for sc in &r.scenes {
        for f in &sc.frames {
            let tof = f.tof.map(|t| t.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                csv_field(&r.model),
                csv_field(&sc.scene_id),
                f.index,
                if f.psnr.0.is_finite() { f.psnr.0.to_string() } else { "inf".into() },
                f.ssim,
                f.lpips,
                f.lpips * r.lpips_table_scale,
                tof
            ));
        }
    }
    s
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `path` (JSON) and the per-frame CSV next to it.
pub fn write_report(path: &Path, r: &MetricReport) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let json = serde_json::to_string_pretty(r).expect("report serialises");
    fs::write(path, json + "\n").at(path)?;
    let csv = path.with_extension("csv");
    fs::write(&csv, report_csv(r)).at(&csv)?;
    Ok(csv)
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).at(path)?;
    let r: MetricReport = serde_json::from_str(&text).map_err(|e| VsrError::format(path, e.to_string()))?;
    if r.schema != vsr_core::metrics::REPORT_SCHEMA {
        return Err(VsrError::format(path, format!("unsupported report schema {:?}", r.schema)));
    }
    Ok(r)
}

/// Loads a checkpoint's networks for inference.
pub fn load_models(checkpoint: &Path) -> Result<Models> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config.scale != SCALE {
        return Err(VsrError::Data(format!(
            "{}: checkpoint is for x{}, only x{SCALE} is supported",
            checkpoint.display(),
            ck.config.scale
        )));
    }
    ck.models()
}

fn side_by_side(left: &Frame, right: &Frame) -> Result<Frame> {
    let (h, w) = right.dims();
    Ok(Frame::from_fn(h, 2 * w, |c, y, x| if x < w { left.at(c, y, x) } else { right.at(c, y, x - w) })?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferredScene {
    pub scene_id: String,
    pub frames: Vec<PathBuf>,
}

/// Super-resolves every scene under `input` into `output/<scene>/`, keeping
/// frame file names. With `compare`, `output/compare/<scene>/` gets bicubic
/// and model output side by side.
pub fn infer_tree(models: &Models, input: &Path, output: &Path, compare: bool) -> Result<Vec<InferredScene>> {
    let manifest = discover(input)?;
    let mut out = Vec::new();
    for scene in &manifest.scenes {
        let lr = crate::imageio::read_frames(&scene.frames, &scene.scene_id)?;
        let sr = models.infer(&lr)?;
        let dir = scene.scene_id.split('/').fold(output.to_path_buf(), |p, s| p.join(s));
        let cmp_dir = scene.scene_id.split('/').fold(output.join("compare"), |p, s| p.join(s));
        let mut written = Vec::new();
        for (i, src) in scene.frames.iter().enumerate() {
            let name = src.file_name().expect("listed frames have names");
            let p = dir.join(name);
            write_png(&p, &sr.frames()[i])?;
            if compare {
                let bic = bicubic_upsample(&lr.frames()[i], SCALE)?;
                write_png(&cmp_dir.join(name), &side_by_side(&bic, &sr.frames()[i])?)?;
            }
            written.push(p);
        }
        out.push(InferredScene { scene_id: scene.scene_id.clone(), frames: written });
    }
    Ok(out)
}
