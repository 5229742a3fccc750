use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    align_video, assemble_video, edit_trajectory, read_video, select_training_set, sidecar_path,
    stylize_trajectory, AdapterChoice, BackendChoice, DirectionChoice, EditDirection,
    MetricChoice, RunConfig, StyleChoice, TrainingSet, VideoCodec,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    make_report, EvalReport, ExternalEmbedder, ExternalFeatures, FaceEmbedder,
    PoseExpressionBackend, ReportInputs, ReportOutputs, ToyEmbedder, ToyFeatures,
};
use crate::facekit::{ExternalDetector, KeypointDetector, KeypointIndexTable};
use crate::genbackend::toy::{ToyIdentity, ToyKeypointDetector, TOY_LAYERS};
use crate::genbackend::{
    load_external, load_toy, personalize, save_toy, Generator, PersonalizeReport, ToyGenerator,
    TrainingPair,
};
use crate::latentspace::{load_space, save_space, AnchorSet, PersonalizedSpace};
use crate::raster::Raster;
use crate::reenact::{
    load_trajectory, reenact_video, save_trajectory, FrameStatus, ReenactSession,
    ReenactmentResult,
};
use crate::scanselect::{save_distance_matrix, DistanceBackend, ExternalPerceptual, PixelL2};
use crate::store::{self, Manifest};

/// File locations inside one run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn for_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.run_dir())
    }

    pub fn scan_dir(&self) -> PathBuf {
        self.root.join("scan")
    }

    pub fn training_video(&self) -> PathBuf {
        self.scan_dir().join("training.rkv")
    }

    pub fn selection_manifest(&self) -> PathBuf {
        self.scan_dir().join("selection.json")
    }

    pub fn personalize_dir(&self) -> PathBuf {
        self.root.join("personalize")
    }

    pub fn generator_dir(&self) -> PathBuf {
        self.personalize_dir().join("generator")
    }

    pub fn space_dir(&self) -> PathBuf {
        self.personalize_dir().join("space")
    }

    pub fn reenact_dir(&self) -> PathBuf {
        self.root.join("reenact")
    }

    pub fn driving_video(&self) -> PathBuf {
        self.reenact_dir().join("driving.rkv")
    }

    /// Per-frame optimizer results, rewritten after every frame.
    pub fn trajectory(&self) -> PathBuf {
        self.reenact_dir().join("trajectory.json")
    }

    pub fn smoothed_trajectory(&self) -> PathBuf {
        self.reenact_dir().join("smoothed.json")
    }

    pub fn reenacted_video(&self, codec: VideoCodec) -> PathBuf {
        self.reenact_dir().join(video_name(codec))
    }

    pub fn edit_video(&self, codec: VideoCodec) -> PathBuf {
        self.root.join("edit").join(video_name(codec))
    }

    pub fn stylize_video(&self, codec: VideoCodec) -> PathBuf {
        self.root.join("stylize").join(video_name(codec))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("eval").join("frames.csv")
    }

    /// Record written by each stage: `<stage>/stage.json`.
    pub fn stage_record(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join("stage.json")
    }
}

fn video_name(codec: VideoCodec) -> &'static str {
    match codec {
        VideoCodec::Raw => "output.rkv",
        VideoCodec::Png => "output_frames",
    }
}

/// Provenance of one stage: the config it ran with, hashes of the manifests
/// it read, and a stage-specific summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord<T> {
    pub stage: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: T,
}

fn write_stage<T: Serialize>(
    layout: &RunLayout,
    stage: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    outputs: T,
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), store::file_hash(p)?)))
        .collect::<Result<_>>()?;
    let record = StageRecord {
        stage: stage.into(),
        config: cfg.clone(),
        inputs,
        outputs,
    };
    store::write_json(&layout.stage_record(stage), &Manifest::new("stage_record", record))
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

pub fn detector_for(cfg: &RunConfig) -> Box<dyn KeypointDetector> {
    match &cfg.detector {
        AdapterChoice::Toy => Box::new(ToyKeypointDetector),
        AdapterChoice::External { name } => Box::new(ExternalDetector { name: name.clone() }),
    }
}

pub fn metric_for(cfg: &RunConfig) -> Box<dyn DistanceBackend> {
    match &cfg.scan.metric {
        MetricChoice::PixelL2 => Box::new(PixelL2),
        MetricChoice::Perceptual { name } => Box::new(ExternalPerceptual { name: name.clone() }),
    }
}

pub fn table_for(cfg: &RunConfig) -> Result<KeypointIndexTable> {
    match &cfg.paths.keypoint_table {
        Some(p) => KeypointIndexTable::load(p),
        None => Ok(KeypointIndexTable::default()),
    }
}

/// Rejects backends that cannot be optimized through in this build.
fn require_toy_backend(cfg: &RunConfig) -> Result<()> {
    match &cfg.backend {
        BackendChoice::Toy => Ok(()),
        BackendChoice::External { manifest } => {
            let g = load_external(manifest)?;
            Err(Error::BackendUnavailable(g.name))
        }
    }
}

fn input_video<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("paths.{key} is not set")))
}

/// Indices and diversity of a chosen training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetReport {
    pub indices: Vec<usize>,
    pub min_pairwise: f64,
    pub avg_pairwise: f64,
    pub stride: usize,
    pub metric: String,
    pub scan_frames: usize,
}

impl SubsetReport {
    fn new(ts: &TrainingSet, scan_frames: usize) -> Self {
        Self {
            indices: ts.indices.clone(),
            min_pairwise: ts.selection.min_pairwise,
            avg_pairwise: ts.selection.avg_pairwise,
            stride: ts.stride,
            metric: ts.distances.metric_id().into(),
            scan_frames,
        }
    }
}

/// Decodes and aligns a self-scan, selects `cfg.scan.n` diverse frames, and
/// persists them with the distance matrix and selection manifest in `out_dir`.
pub fn build_training_set(video: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<TrainingSet> {
    cfg.validate()?;
    let scan = read_video(video)?;
    let table = table_for(cfg)?;
    let detector = detector_for(cfg);
    let metric = metric_for(cfg);
    let ts = select_training_set(&scan.frames, detector.as_ref(), &table, metric.as_ref(), cfg)?;
    assemble_video(&ts.frames, scan.fps, &out_dir.join("training.rkv"), VideoCodec::Raw)?;
    save_distance_matrix(out_dir, &ts.distances)?;
    let mut manifest = Manifest::new("training_set", SubsetReport::new(&ts, scan.frames.len()));
    manifest.blobs.insert(
        "alignment".into(),
        store::write_blob(
            out_dir,
            "alignment",
            ts.alignment.transforms.iter().flat_map(|t| t.as_array()),
            vec![ts.alignment.transforms.len(), 4],
        )?,
    );
    store::write_json(&out_dir.join("selection.json"), &manifest)?;
    Ok(ts)
}

pub fn run_scan_select(cfg: &RunConfig, layout: &RunLayout) -> Result<SubsetReport> {
    let video = input_video(&cfg.paths.scan_video, "scan_video")?;
    let ts = build_training_set(video, cfg, &layout.scan_dir())?;
    let report = SubsetReport::new(&ts, ts.alignment.transforms.len());
    write_stage(layout, "scan", cfg, &[&sidecar_path(video)], report.clone())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct PersonalizeOutcome {
    pub generator: ToyGenerator,
    pub space: PersonalizedSpace,
    pub report: PersonalizeReport,
}

/// Inverts every training frame into an anchor, tunes the toy generator on
/// the anchor/frame pairs, and saves the generator and the space.
pub fn run_personalize(cfg: &RunConfig, layout: &RunLayout) -> Result<PersonalizeOutcome> {
    cfg.validate()?;
    require_toy_backend(cfg)?;
    let training_path = layout.training_video();
    let training = read_video(&training_path)?.frames;
    let identity = training
        .iter()
        .find_map(|f| f.annotation.as_ref().map(|a| a.identity.clone()))
        .unwrap_or_else(ToyIdentity::default);
    let base = ToyGenerator::new(identity).with_resolution(cfg.canonical_resolution);
    if let Some(f) = training.iter().find(|f| f.width() != base.resolution() || f.height() != base.resolution()) {
        return Err(Error::ShapeMismatch(format!(
            "training frames are {}x{}, generator renders {}",
            f.width(),
            f.height(),
            base.resolution()
        )));
    }
    let anchors = training
        .par_iter()
        .map(|f| base.invert(f))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<TrainingPair> = anchors
        .iter()
        .zip(&training)
        .map(|(a, t)| TrainingPair {
            anchor: a.clone(),
            target: t.clone(),
        })
        .collect();
    let p = &cfg.personalize;
    let (generator, report) = personalize(&base, &pairs, p.steps, p.step_size, None)?;
    let space = PersonalizedSpace::new(AnchorSet::new(anchors)?, p.beta, TOY_LAYERS, p.sharpness)?;
    save_toy(&layout.generator_dir(), &generator)?;
    save_space(&layout.space_dir(), &space)?;
    write_stage(layout, "personalize", cfg, &[&sidecar_path(&training_path)], report)?;
    Ok(PersonalizeOutcome {
        generator,
        space,
        report,
    })
}

fn load_personalized(layout: &RunLayout) -> Result<(ToyGenerator, PersonalizedSpace)> {
    Ok((load_toy(&layout.generator_dir())?, load_space(&layout.space_dir())?))
}

fn split_manifest_path(path: &Path) -> Result<(PathBuf, String)> {
    let name = path
        .file_stem()
        .ok_or_else(|| Error::InvalidParameter(format!("not a manifest path: {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    Ok((path.parent().unwrap_or(Path::new("")).to_path_buf(), name))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReenactSummary {
    pub frames: usize,
    pub resumed_frames: usize,
    pub no_progress_frames: Vec<usize>,
    pub losses: Vec<f64>,
}

/// Aligns the driving video, reenacts it in the personalized space, and
/// writes the trajectories and the rendered video.
///
/// With `resume`, frames already present in that trajectory manifest are
/// kept and optimization continues after them.
pub fn run_reenact(cfg: &RunConfig, layout: &RunLayout, resume: Option<&Path>) -> Result<ReenactmentResult> {
    cfg.validate()?;
    require_toy_backend(cfg)?;
    let video = input_video(&cfg.paths.driving_video, "driving_video")?;
    let driving = read_video(video)?;
    let table = table_for(cfg)?;
    let detector = detector_for(cfg);
    let aligned = align_video(
        &driving.frames,
        detector.as_ref(),
        &table,
        &cfg.align,
        cfg.canonical_resolution,
    )?;
    let (generator, space) = load_personalized(layout)?;
    let previous = resume
        .map(|p| {
            let (dir, name) = split_manifest_path(require(p)?)?;
            load_trajectory(&dir, &name)
        })
        .transpose()?;
    let dir = layout.reenact_dir();
    assemble_video(&aligned.frames, driving.fps, &layout.driving_video(), VideoCodec::Raw)?;
    let session = ReenactSession {
        space: &space,
        backend: &generator,
        detector: detector.as_ref(),
        table: &table,
        config: &cfg.reenact,
    };
    let result = reenact_video(&session, &aligned.frames, previous.as_ref(), |traj| {
        save_trajectory(&dir, "trajectory", traj)
    })?;
    save_trajectory(&dir, "trajectory", &result.optimized)?;
    save_trajectory(&dir, "smoothed", &result.smoothed)?;
    assemble_video(&result.rasters, driving.fps, &layout.reenacted_video(cfg.codec), cfg.codec)?;
    let summary = ReenactSummary {
        frames: result.rasters.len(),
        resumed_frames: previous.as_ref().map_or(0, |p| p.len()),
        no_progress_frames: result
            .statuses
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == FrameStatus::NoProgress)
            .map(|(t, _)| t)
            .collect(),
        losses: result.optimized.losses.clone(),
    };
    write_stage(
        layout,
        "reenact",
        cfg,
        &[
            &sidecar_path(video),
            &layout.generator_dir().join("generator.json"),
            &layout.space_dir().join("space.json"),
        ],
        summary,
    )?;
    Ok(result)
}

fn load_smoothed(layout: &RunLayout) -> Result<crate::reenact::LatentTrajectory> {
    let (dir, name) = split_manifest_path(&layout.smoothed_trajectory())?;
    load_trajectory(&dir, &name)
}

pub fn load_direction(path: &Path) -> Result<EditDirection> {
    let manifest: Manifest<EditDirection> = store::read_manifest(path, "edit_direction")?;
    Ok(manifest.meta)
}

pub fn save_direction(path: &Path, direction: &EditDirection) -> Result<()> {
    store::write_json(path, &Manifest::new("edit_direction", direction.clone()))
}

/// Shifts the smoothed trajectory along the configured direction and renders it.
pub fn run_edit(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<Raster<f64>>> {
    cfg.validate()?;
    require_toy_backend(cfg)?;
    let (generator, space) = load_personalized(layout)?;
    let traj = load_smoothed(layout)?;
    let direction = match &cfg.edit.direction {
        DirectionChoice::ToyMouth => EditDirection::toy_mouth(&generator.map),
        DirectionChoice::File { path } => load_direction(path)?,
    };
    let codes = edit_trajectory(&traj, &space, &direction, cfg.edit.step)?;
    let frames = codes
        .par_iter()
        .map(|c| generator.generate(c))
        .collect::<Result<Vec<_>>>()?;
    assemble_video(&frames, cfg.fps, &layout.edit_video(cfg.codec), cfg.codec)?;
    write_stage(layout, "edit", cfg, &[&layout.smoothed_trajectory()], direction)?;
    Ok(frames)
}

/// Renders the smoothed trajectory through the configured style backend.
pub fn run_stylize(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<Raster<f64>>> {
    cfg.validate()?;
    let (generator, space) = load_personalized(layout)?;
    let traj = load_smoothed(layout)?;
    let frames = match &cfg.stylize {
        StyleChoice::ToyInverted => stylize_trajectory(&traj, &space, &generator.stylized())?,
        StyleChoice::ToyDir { path } => stylize_trajectory(&traj, &space, &load_toy(path)?)?,
        StyleChoice::External { manifest } => stylize_trajectory(&traj, &space, &load_external(manifest)?)?,
    };
    assemble_video(&frames, cfg.fps, &layout.stylize_video(cfg.codec), cfg.codec)?;
    write_stage(layout, "stylize", cfg, &[&layout.smoothed_trajectory()], frames.len())?;
    Ok(frames)
}

/// Scores the reenacted video and writes the JSON report and per-frame CSV.
pub fn run_evaluate(cfg: &RunConfig, layout: &RunLayout) -> Result<EvalReport> {
    cfg.validate()?;
    let embedder: Box<dyn FaceEmbedder> = match &cfg.eval.embedder {
        AdapterChoice::Toy => Box::new(ToyEmbedder),
        AdapterChoice::External { name } => Box::new(ExternalEmbedder { name: name.clone() }),
    };
    let features: Box<dyn PoseExpressionBackend> = match &cfg.eval.features {
        AdapterChoice::Toy => Box::new(ToyFeatures),
        AdapterChoice::External { name } => Box::new(ExternalFeatures { name: name.clone() }),
    };
    let inputs = ReportInputs {
        generated: layout.reenacted_video(cfg.codec),
        driving: layout.driving_video(),
        training: layout.training_video(),
        trajectory: layout.smoothed_trajectory(),
    };
    let outputs = ReportOutputs {
        json: layout.report_json(),
        csv: layout.report_csv(),
    };
    make_report(&inputs, &outputs, embedder.as_ref(), features.as_ref(), cfg.eval.top_k, cfg)
}
