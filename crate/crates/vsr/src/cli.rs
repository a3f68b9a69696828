//! Command-line surface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vsr_core::dataio::DegradeParams;
use vsr_core::metrics::ProtocolConfig;

use crate::config::RunConfig;
use crate::dataset::{is_prepared, prepare, Layout};
use crate::error::{IoContext, Result, VsrError};
use crate::eval::{self, Backbone, EvalOptions};
use crate::report::{write_report_dir, ReportRequest};
use crate::train::{self, TrainOptions};
use crate::OUTPUT_ROOT_ENV;

#[derive(Debug, Parser)]
#[command(name = "vsr", version, about = "x4 video super-resolution: data, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Degrade an HR scene tree into LR/ and HR/ subtrees plus manifest.txt.
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1.5)]
        sigma: f64,
        #[arg(long, default_value_t = 13)]
        ksize: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// flat-scene-dirs or septuplet; detected when omitted.
        #[arg(long)]
        layout: Option<String>,
        /// Rewrite scenes that are already prepared.
        #[arg(long)]
        force: bool,
    },
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output_dir` from the config, else $VSR_OUTPUT_ROOT/<config name>.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this step is reached, leaving a resumable checkpoint.
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Generator-only pretraining into a checkpoint usable as `init_checkpoint`.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Super-resolve LR scenes with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write bicubic | model side-by-side frames under compare/.
        #[arg(long)]
        compare: bool,
    },
    /// Score generated scenes against ground truth.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "model")]
        model: String,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Score bicubic upsampling of the degraded ground truth.
    Baseline {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Degradation for raw ground truth (ignored for prepared trees).
        #[arg(long, default_value_t = 1.5)]
        sigma: f64,
        #[arg(long, default_value_t = 13)]
        ksize: usize,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Merge metric reports into comparison tables and plots.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reference dataset (Vid4, ToS3 or none); detected from scene names when omitted.
        #[arg(long)]
        dataset: Option<String>,
        /// Training logs to plot as loss curves.
        #[arg(long, num_args = 1..)]
        logs: Vec<PathBuf>,
    },
    /// Print the resolved configuration and network sizes.
    Describe {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct MetricArgs {
    /// Perceptual backbone weights, JSON [[name, tensor], ...].
    #[arg(long)]
    pub lpips_weights: Option<PathBuf>,
    /// Measure the 8 px border at LR scale instead of on the result frames.
    #[arg(long)]
    pub border_at_lr: bool,
}

impl MetricArgs {
    fn options(&self, model: &str) -> Result<EvalOptions> {
        let backbone = match &self.lpips_weights {
            Some(p) => Backbone::from_weights_file(p)?,
            None => Backbone::surrogate(),
        };
        Ok(EvalOptions {
            protocol: ProtocolConfig { border_at_lr: self.border_at_lr, ..ProtocolConfig::default() },
            backbone,
            model: model.into(),
        })
    }
}

/// Written next to command outputs.
#[derive(Debug, Serialize)]
struct CommandManifest<'a> {
    schema: &'static str,
    command: &'a str,
    code_version: &'static str,
    args: Vec<String>,
}

fn write_command_manifest(path: &Path, command: &str, args: &[OsString]) -> Result<()> {
    let m = CommandManifest {
        schema: "vsr-command/1",
        command,
        code_version: env!("CARGO_PKG_VERSION"),
        args: args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serialises") + "\n";
    if fs::read_to_string(path).ok().as_deref() == Some(text.as_str()) {
        return Ok(());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, text).at(path)
}

fn sidecar(report: &Path) -> PathBuf {
    report.with_extension("manifest.json")
}

fn default_output(config: &Path, cfg: &RunConfig) -> PathBuf {
    if let Some(d) = &cfg.run.output_dir {
        return d.clone();
    }
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(stem)
}

/// Runs one command; returns the summary printed on success.
pub fn run(cli: Cli, raw_args: &[OsString]) -> Result<String> {
    match cli.command {
        Command::PrepareData { input, output, sigma, ksize, scale, layout, force } => {
            let layout = layout.as_deref().map(str::parse::<Layout>).transpose()?;
            if !(sigma > 0.0) || ksize % 2 == 0 || scale != vsr_core::SCALE {
                return Err(VsrError::Config(format!(
                    "need sigma > 0, odd ksize and scale {} (got {sigma}, {ksize}, {scale})",
                    vsr_core::SCALE
                )));
            }
            let s = prepare(&input, &output, layout, DegradeParams { sigma, ksize, scale }, force)?;
            write_command_manifest(&output.join("vsr_manifest.json"), "prepare-data", raw_args)?;
            Ok(format!(
                "prepared {} scene(s), skipped {} already prepared; manifest {}",
                s.written.len(),
                s.skipped.len(),
                if s.manifest_rewritten { "written" } else { "unchanged" }
            ))
        }
        Command::Train { config, output, resume, max_steps, quiet } => {
            let cfg = RunConfig::load(&config)?;
            let out = output.unwrap_or_else(|| default_output(&config, &cfg));
            let o = train::run_training(&cfg, &out, &TrainOptions { max_steps, resume, verbose: !quiet })?;
            let status = if o.finished { "finished" } else { "stopped" };
            let loss = o.last.map(|l| format!(" last total loss {:.6}", l.generator.total)).unwrap_or_default();
            Ok(format!(
                "{status} at step {} ({}){loss}; checkpoint {}",
                o.final_step,
                match o.resumed_from {
                    Some(s) => format!("resumed from {s}"),
                    None => "fresh run".into(),
                },
                o.last_checkpoint.display()
            ))
        }
        Command::Pretrain { config, steps, output } => {
            let cfg = RunConfig::load(&config)?;
            train::run_pretrain(&cfg, steps, &output)?;
            write_command_manifest(&sidecar(&output), "pretrain", raw_args)?;
            Ok(format!("pretrained {steps} step(s) into {}", output.display()))
        }
        Command::Infer { checkpoint, input, output, compare } => {
            let models = eval::load_models(&checkpoint)?;
            let input = if is_prepared(&input) { input.join("LR") } else { input };
            let scenes = eval::infer_tree(&models, &input, &output, compare)?;
            write_command_manifest(&output.join("vsr_manifest.json"), "infer", raw_args)?;
            let frames: usize = scenes.iter().map(|s| s.frames.len()).sum();
            Ok(format!("wrote {frames} frame(s) for {} scene(s) to {}", scenes.len(), output.display()))
        }
        Command::Evaluate { gen, gt, report, model, metrics } => {
            let r = eval::evaluate_dirs(&gen, &gt, &metrics.options(&model)?)?;
            let csv = eval::write_report(&report, &r)?;
            write_command_manifest(&sidecar(&report), "evaluate", raw_args)?;
            Ok(summary(&r, &report, &csv))
        }
        Command::Baseline { gt, report, sigma, ksize, metrics } => {
            let params = DegradeParams { sigma, ksize, scale: vsr_core::SCALE };
            let r = eval::baseline(&gt, params, &metrics.options("bicubic")?)?;
            let csv = eval::write_report(&report, &r)?;
            write_command_manifest(&sidecar(&report), "baseline", raw_args)?;
            Ok(summary(&r, &report, &csv))
        }
        Command::Report { inputs, out, dataset, logs } => {
            let reports = inputs.iter().map(|p| eval::read_report(p)).collect::<Result<Vec<_>>>()?;
            let logs = logs
                .iter()
                .map(|p| {
                    let label = p
                        .parent()
                        .and_then(|d| d.file_name())
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| p.display().to_string());
                    Ok((label, train::read_log(p)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let o = write_report_dir(&ReportRequest { reports: &reports, dataset: dataset.as_deref(), logs: &logs }, &out)?;
            write_command_manifest(&out.join("vsr_manifest.json"), "report", raw_args)?;
            Ok(format!("{}tables in {}, {} plot(s)", o.rendered, o.text.display(), o.plots.len()))
        }
        Command::Describe { config } => {
            let cfg = RunConfig::load(&config)?;
            let m = vsr_core::trainer::Models::new(&cfg.train)?;
            let flow = m.flow_params().map(|p| p.parameter_count()).unwrap_or(0);
            Ok(format!(
                "{}{}\nflow ({}) parameters: {flow}\ndiscriminator parameters: {}\neffective neighbours per target: {}",
                cfg.to_text(),
                m.generator.describe(),
                m.flow.tag(),
                m.discriminator.params().parameter_count(),
                cfg.train.effective_neighbors()
            ))
        }
    }
}

fn summary(r: &vsr_core::metrics::MetricReport, json: &Path, csv: &Path) -> String {
    let o = &r.overall;
    format!(
        "{}: PSNR {} dB, SSIM {:.3}, LPIPS(x{}) {:.2}, tOF {:.2} over {} scene(s); wrote {} and {}",
        r.model,
        o.psnr,
        o.ssim,
        r.lpips_table_scale,
        o.lpips,
        o.tof,
        r.scenes.len(),
        json.display(),
        csv.display()
    )
}

/// Parses, runs and reports; returns the process exit code.
pub fn main_with(args: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand)
            {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", VsrError::Config(msg.to_string()).render());
            return crate::Category::BadArguments.exit_code();
        }
    };
    match run(cli, &args) {
        Ok(s) => {
            println!("{s}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.render());
            e.category().exit_code()
        }
    }
}
