//! PNG line charts: per-frame metric curves and training loss curves.
//!
//! Text needs a TrueType font, looked up at `VSR_FONT` or the usual DejaVu
//! location. Without one the charts are drawn with lines only.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;
use vsr_core::trainer::StepLog;

use crate::error::{Result, VsrError};

const SIZE: (u32, u32) = (900, 540);
const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
];

fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let candidates: Vec<String> = match std::env::var("VSR_FONT") {
            Ok(p) => vec![p],
            Err(_) => FONT_CANDIDATES.iter().map(|s| s.to_string()).collect(),
        };
        for c in candidates {
            if let Ok(bytes) = std::fs::read(&c) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn span(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = if hi > lo { (hi - lo) * 0.05 } else { lo.abs().max(1.0) * 0.05 };
    Some((lo - pad, hi + pad))
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> VsrError {
    VsrError::Runtime(format!("{}: cannot draw chart: {e}", path.display()))
}

pub fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let xs = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (Some(xr), Some(yr)) = (xs, ys) else {
        return Err(VsrError::Data(format!("{}: nothing to plot", path.display())));
    };
    let text = font_available();
    let (w, h) = SIZE;
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
        let mut builder = ChartBuilder::on(&root);
        builder.margin(16);
        if text {
            builder
                .caption(title, ("sans-serif", 22))
                .x_label_area_size(40)
                .y_label_area_size(70);
        }
        let mut chart = builder
            .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
            .map_err(|e| plot_err(path, e))?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc(x_desc).y_desc(y_desc);
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(|e| plot_err(path, e))?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite());
            let drawn = chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(|e| plot_err(path, e))?;
            if text {
                drawn
                    .label(s.label.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
        }
        if text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()
                .map_err(|e| plot_err(path, e))?;
        }
        root.present().map_err(|e| plot_err(path, e))?;
    }
    let img = image::RgbImage::from_raw(w, h, buf).expect("buffer matches chart size");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| VsrError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| VsrError::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// log10 of the total and pixel generator losses against step, per run.
pub fn loss_curves(runs: &[(String, Vec<StepLog>)], path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for (label, entries) in runs {
        let log_of = |v: f64| if v > 0.0 { v.log10() } else { f64::NAN };
        series.push(Series {
            label: format!("{label} total"),
            points: entries.iter().map(|e| (e.step as f64, log_of(e.generator.total))).collect(),
        });
        series.push(Series {
            label: format!("{label} pixel"),
            points: entries.iter().map(|e| (e.step as f64, log_of(e.generator.terms.pixel))).collect(),
        });
        if entries.iter().any(|e| e.discriminator > 0.0) {
            series.push(Series {
                label: format!("{label} discriminator"),
                points: entries.iter().map(|e| (e.step as f64, log_of(e.discriminator))).collect(),
            });
        }
    }
    line_chart(path, "Training losses", "step", "log10 loss", &series)
}
