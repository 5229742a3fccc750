//! Command-line front end: one subcommand per pipeline stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use reenactkit::genbackend::ToyGenerator;
use reenactkit::pipeline::{
    self, assemble_video, DirectionChoice, MetricChoice, RunConfig, RunLayout, StyleChoice,
};
use reenactkit::synth;

#[derive(Parser)]
#[command(name = "reenactkit", version, about = "Personalized facial reenactment toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON, or TOML by extension); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run_name`.
    #[arg(long, global = true)]
    run_name: Option<String>,
    /// Overrides `paths.cache_root` (REENACT_CACHE still wins when set).
    #[arg(long, global = true)]
    cache_root: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    PixelL2,
    Perceptual,
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective configuration as JSON.
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a toy self-scan and driving video.
    Synth {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        driving: PathBuf,
        #[arg(long, default_value_t = 300)]
        scan_frames: usize,
        #[arg(long, default_value_t = 30)]
        driving_frames: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Align a self-scan and select a diverse training set.
    ScanSelect {
        #[arg(long)]
        video: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        /// Also write the selected indices here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Invert the training set into anchors and tune the generator.
    Personalize {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reenact a driving video in the personalized space.
    Reenact {
        #[arg(long)]
        driving: Option<PathBuf>,
        /// Continue from a partial trajectory manifest.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Shift the reenacted trajectory along a semantic direction.
    Edit {
        /// An edit-direction manifest; the toy mouth direction otherwise.
        #[arg(long)]
        direction: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        step: Option<f64>,
    },
    /// Render the reenacted trajectory through another generator.
    Stylize {
        /// A saved toy generator directory; the inverted palette otherwise.
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Compute identity, pose and expression metrics.
    Evaluate {
        #[arg(long)]
        top_k: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.run_name {
        cfg.run_name = name.clone();
    }
    if let Some(root) = &common.cache_root {
        cfg.paths.cache_root = Some(root.clone());
    }
    Ok(cfg)
}

fn finish(mut cfg: RunConfig, apply: impl FnOnce(&mut RunConfig)) -> Result<(RunConfig, RunLayout)> {
    apply(&mut cfg);
    cfg.validate()?;
    let layout = RunLayout::for_config(&cfg);
    Ok((cfg, layout))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    reenactkit::store::write_json(path, value).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Config { out } => {
            let (cfg, _) = finish(cfg, |_| {})?;
            match out {
                Some(path) => write_json(&path, &cfg)?,
                None => print_json(&cfg)?,
            }
        }
        Command::Synth {
            scan,
            driving,
            scan_frames,
            driving_frames,
            seed,
        } => {
            let (cfg, _) = finish(cfg, |c| c.seed = seed.unwrap_or(c.seed))?;
            let g = ToyGenerator::default().with_resolution(cfg.canonical_resolution);
            let burst = (scan_frames >= 10).then_some((scan_frames / 3, 5));
            let scan_clip = synth::toy_scan(&g, scan_frames, 0.5, burst, cfg.seed);
            let drive_clip = synth::toy_scan(&g, driving_frames, 0.4, None, cfg.seed.wrapping_add(1));
            assemble_video(&scan_clip, cfg.fps, &scan, cfg.codec)?;
            assemble_video(&drive_clip, cfg.fps, &driving, cfg.codec)?;
            println!("wrote {} and {}", scan.display(), driving.display());
        }
        Command::ScanSelect { video, n, metric, out } => {
            let (cfg, layout) = finish(cfg, |c| {
                if let Some(v) = video {
                    c.paths.scan_video = Some(v);
                }
                if let Some(n) = n {
                    c.scan.n = n;
                }
                match metric {
                    Some(Metric::PixelL2) => c.scan.metric = MetricChoice::PixelL2,
                    Some(Metric::Perceptual) => {
                        c.scan.metric = MetricChoice::Perceptual { name: "perceptual".into() }
                    }
                    None => {}
                }
            })?;
            let report = pipeline::run_scan_select(&cfg, &layout)?;
            match out {
                Some(path) => write_json(&path, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Personalize { steps } => {
            let (cfg, layout) = finish(cfg, |c| c.personalize.steps = steps.unwrap_or(c.personalize.steps))?;
            let outcome = pipeline::run_personalize(&cfg, &layout)?;
            print_json(&outcome.report)?;
        }
        Command::Reenact {
            driving,
            resume,
            steps,
            seed,
        } => {
            let (cfg, layout) = finish(cfg, |c| {
                if let Some(d) = driving {
                    c.paths.driving_video = Some(d);
                }
                c.reenact.steps = steps.unwrap_or(c.reenact.steps);
                c.reenact.seed = seed.unwrap_or(c.reenact.seed);
            })?;
            let result = pipeline::run_reenact(&cfg, &layout, resume.as_deref())?;
            println!(
                "reenacted {} frames into {}",
                result.rasters.len(),
                layout.reenacted_video(cfg.codec).display()
            );
        }
        Command::Edit { direction, step } => {
            let (cfg, layout) = finish(cfg, |c| {
                if let Some(path) = direction {
                    c.edit.direction = DirectionChoice::File { path };
                }
                c.edit.step = step.unwrap_or(c.edit.step);
            })?;
            let frames = pipeline::run_edit(&cfg, &layout)?;
            println!("edited {} frames into {}", frames.len(), layout.edit_video(cfg.codec).display());
        }
        Command::Stylize { generator } => {
            let (cfg, layout) = finish(cfg, |c| {
                if let Some(path) = generator {
                    c.stylize = StyleChoice::ToyDir { path };
                }
            })?;
            let frames = pipeline::run_stylize(&cfg, &layout)?;
            println!("stylized {} frames into {}", frames.len(), layout.stylize_video(cfg.codec).display());
        }
        Command::Evaluate { top_k } => {
            let (cfg, layout) = finish(cfg, |c| c.eval.top_k = top_k.unwrap_or(c.eval.top_k))?;
            let report = pipeline::run_evaluate(&cfg, &layout)?;
            println!(
                "id {:.4}  apd {:.6}  aed {:.6}  ({} frames, report in {})",
                report.id_score,
                report.apd,
                report.aed,
                report.frames.len(),
                layout.report_json().display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
