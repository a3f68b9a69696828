//! Merged comparison tables, CSV and per-frame plots over metric reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vsr_core::metrics::{Aggregate, MetricReport};
use vsr_core::trainer::StepLog;

use crate::error::{IoContext, Result, VsrError};
use crate::eval::csv_field;
use crate::plot::{line_chart, loss_curves, Series};

pub const PUBLISHED_JSON: &str = include_str!("../data/published_results.json");
pub const METRICS: [&str; 4] = ["PSNR", "LPIPS", "tOF", "SSIM"];

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedTable {
    pub id: String,
    pub title: String,
    pub dataset: String,
    pub columns: Vec<String>,
    pub values: BTreeMap<String, Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Published {
    pub label: String,
    pub note: String,
    pub rows: Vec<String>,
    pub tables: Vec<PublishedTable>,
    pub datasets: BTreeMap<String, Vec<String>>,
}

impl Published {
    pub fn bundled() -> Self {
        serde_json::from_str(PUBLISHED_JSON).expect("bundled reference data parses")
    }

    /// The dataset whose scene list equals the report's scenes.
    pub fn detect_dataset(&self, report: &MetricReport) -> Option<String> {
        let mut ids: Vec<String> = report.scenes.iter().map(|s| s.scene_id.to_lowercase()).collect();
        ids.sort();
        self.datasets.iter().find(|(_, scenes)| **scenes == ids).map(|(name, _)| name.clone())
    }

    pub fn tables_for(&self, dataset: &str) -> Vec<&PublishedTable> {
        self.tables.iter().filter(|t| t.dataset.eq_ignore_ascii_case(dataset)).collect()
    }
}

/// Value of `metric` in an aggregate, in table units.
pub fn metric_value(a: &Aggregate, metric: &str) -> Option<f64> {
    match metric {
        "PSNR" => Some(a.psnr.0),
        "LPIPS" => Some(a.lpips),
        "tOF" => (a.temporal_frames > 0).then_some(a.tof),
        "SSIM" => Some(a.ssim),
        _ => None,
    }
}

pub fn format_metric(metric: &str, v: Option<f64>) -> String {
    match v {
        None => "NA".into(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) if metric == "SSIM" => format!("{v:.3}"),
        Some(v) => format!("{v:.2}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub published: bool,
    /// Indexed like [`METRICS`].
    pub values: [Option<f64>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub id: String,
    pub title: String,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn render(&self, published_label: &str) -> String {
        let mut header = vec!["Metric".to_string()];
        header.extend(self.columns.iter().map(|c| {
            if c.published {
                format!("{} ({published_label})", c.name)
            } else {
                c.name.clone()
            }
        }));
        let mut rows = vec![header];
        for (i, m) in METRICS.iter().enumerate() {
            let mut r = vec![m.to_string()];
            r.extend(self.columns.iter().map(|c| format_metric(m, c.values[i])));
            rows.push(r);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let line = |r: &[String]| {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!(" {c:<w$} ")).collect();
            format!("|{}|\n", cells.join("|"))
        };
        let rule = format!("|{}|\n", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|"));
        let mut s = format!("{}\n", self.title);
        s.push_str(&line(&rows[0]));
        s.push_str(&rule);
        for r in &rows[1..] {
            s.push_str(&line(r));
        }
        s
    }
}

/// Column names made unique in input order (`name`, `name #2`, ...).
pub fn unique_names(reports: &[MetricReport]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    reports
        .iter()
        .map(|r| {
            let n = seen.entry(r.model.as_str()).or_insert(0);
            *n += 1;
            if *n == 1 {
                r.model.clone()
            } else {
                format!("{} #{}", r.model, n)
            }
        })
        .collect()
}

fn measured_columns(reports: &[MetricReport]) -> Vec<Column> {
    reports
        .iter()
        .zip(unique_names(reports))
        .map(|(r, name)| Column {
            name,
            published: false,
            values: METRICS.map(|m| metric_value(&r.overall, m)),
        })
        .collect()
}

/// The merged measured table, then one table per published table of the
/// dataset with the measured columns in front.
pub fn build_tables(reports: &[MetricReport], dataset: Option<&str>, published: &Published) -> Vec<Table> {
    let measured = measured_columns(reports);
    let mut tables = vec![Table {
        id: "measured".into(),
        title: match dataset {
            Some(d) => format!("Measured results on {d}"),
            None => "Measured results".into(),
        },
        columns: measured.clone(),
    }];
    if let Some(d) = dataset {
        for t in published.tables_for(d) {
            let mut columns = measured.clone();
            for (j, name) in t.columns.iter().enumerate() {
                let values = METRICS.map(|m| t.values.get(m).and_then(|v| v.get(j).copied().flatten()));
                columns.push(Column { name: name.clone(), published: true, values });
            }
            tables.push(Table { id: t.id.clone(), title: format!("{} (measured and {})", t.title, published.label), columns });
        }
    }
    tables
}

pub fn tables_csv(tables: &[Table], published_label: &str) -> String {
    let mut s = String::from("table,metric,column,source,value\n");
    for t in tables {
        for (i, m) in METRICS.iter().enumerate() {
            for c in &t.columns {
                let value = match c.values[i] {
                    Some(v) if v.is_infinite() => "inf".to_string(),
                    Some(v) => v.to_string(),
                    None => String::new(),
                };
                let source = if c.published { published_label } else { "measured" };
                s.push_str(&format!("{},{m},{},{source},{value}\n", t.id, csv_field(&c.name)));
            }
        }
    }
    s
}

/// Scene-by-scene PSNR and SSIM for the measured inputs.
pub fn scene_tables(reports: &[MetricReport]) -> String {
    let names = unique_names(reports);
    let mut scenes: Vec<&str> = reports.iter().flat_map(|r| r.scenes.iter().map(|s| s.scene_id.as_str())).collect();
    scenes.sort();
    scenes.dedup();
    let mut out = String::new();
    for metric in ["PSNR", "SSIM"] {
        let mut rows = vec![std::iter::once("Scene".to_string()).chain(names.iter().cloned()).collect::<Vec<_>>()];
        for sc in &scenes {
            let mut r = vec![sc.to_string()];
            for rep in reports {
                let v = rep.scenes.iter().find(|s| s.scene_id == *sc).and_then(|s| metric_value(&s.mean, metric));
                r.push(format_metric(metric, v));
            }
            rows.push(r);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        out.push_str(&format!("Per-scene {metric}\n"));
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!(" {c:<w$} ")).collect();
            out.push_str(&format!("|{}|\n", cells.join("|")));
            if i == 0 {
                out.push_str(&format!("|{}|\n", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")));
            }
        }
        out.push('\n');
    }
    out
}

fn file_stem(scene: &str) -> String {
    scene.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// `psnr_<scene>.png` and `ssim_<scene>.png` with one curve per report.
pub fn frame_plots(reports: &[MetricReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let names = unique_names(reports);
    let mut scenes: Vec<&str> = reports.iter().flat_map(|r| r.scenes.iter().map(|s| s.scene_id.as_str())).collect();
    scenes.sort();
    scenes.dedup();
    let mut out = Vec::new();
    for sc in scenes {
        for metric in ["PSNR", "SSIM"] {
            let series: Vec<Series> = reports
                .iter()
                .zip(&names)
                .filter_map(|(r, name)| {
                    let s = r.scenes.iter().find(|s| s.scene_id == sc)?;
                    let points = s
                        .frames
                        .iter()
                        .map(|f| (f.index as f64, if metric == "PSNR" { f.psnr.0 } else { f.ssim }))
                        .collect();
                    Some(Series { label: name.clone(), points })
                })
                .collect();
            let p = dir.join(format!("{}_{}.png", metric.to_lowercase(), file_stem(sc)));
            let unit = if metric == "PSNR" { "PSNR (dB)" } else { "SSIM" };
            match line_chart(&p, &format!("{sc}: per-frame {metric}"), "frame", unit, &series) {
                Ok(()) => out.push(p),
                Err(VsrError::Data(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub text: PathBuf,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub rendered: String,
}

pub struct ReportRequest<'a> {
    pub reports: &'a [MetricReport],
    /// Overrides detection from scene names; `none` disables reference columns.
    pub dataset: Option<&'a str>,
    pub logs: &'a [(String, Vec<StepLog>)],
}

pub fn write_report_dir(req: &ReportRequest<'_>, out: &Path) -> Result<ReportOutput> {
    if req.reports.is_empty() {
        return Err(VsrError::Config("report needs at least one input".into()));
    }
    let published = Published::bundled();
    let dataset = match req.dataset {
        Some(d) if d.eq_ignore_ascii_case("none") => None,
        Some(d) => Some(
            published
                .datasets
                .keys()
                .find(|k| k.eq_ignore_ascii_case(d))
                .cloned()
                .ok_or_else(|| VsrError::Config(format!("no reference data for dataset {d:?}")))?,
        ),
        None => {
            let found: Vec<Option<String>> = req.reports.iter().map(|r| published.detect_dataset(r)).collect();
            if found.windows(2).all(|w| w[0] == w[1]) {
                found[0].clone()
            } else {
                None
            }
        }
    };
    let tables = build_tables(req.reports, dataset.as_deref(), &published);
    let mut rendered = String::new();
    for t in &tables {
        rendered.push_str(&t.render(&published.label));
        rendered.push('\n');
    }
    rendered.push_str(&scene_tables(req.reports));
    let mut lpips: Vec<&str> = req.reports.iter().map(|r| r.lpips_backbone.as_str()).collect();
    lpips.sort();
    lpips.dedup();
    rendered.push_str(&format!(
        "LPIPS x{} with backbone(s) {}; tOF norm {}.\n",
        req.reports[0].lpips_table_scale,
        lpips.join(", "),
        req.reports[0].tof_norm
    ));
    if dataset.is_some() {
        rendered.push_str(&format!("Columns marked ({}) are reference values, not measured here.\n", published.label));
    }
    fs::create_dir_all(out).at(out)?;
    let text = out.join("tables.txt");
    fs::write(&text, &rendered).at(&text)?;
    let csv = out.join("tables.csv");
    fs::write(&csv, tables_csv(&tables, &published.label)).at(&csv)?;
    let mut plots = frame_plots(req.reports, &out.join("plots"))?;
    if !req.logs.is_empty() {
        let p = out.join("plots").join("loss_curves.png");
        loss_curves(req.logs, &p)?;
        plots.push(p);
    }
    Ok(ReportOutput { text, csv, plots, rendered })
}
