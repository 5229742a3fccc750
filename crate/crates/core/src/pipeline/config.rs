use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{toy_canonical_anchors, AlignmentAnchors, VideoCodec};
use crate::error::{Error, Result};
use crate::genbackend::toy::TOY_RESOLUTION;
use crate::latentspace::{DEFAULT_BETA, DEFAULT_SHARPNESS};
use crate::reenact::ReenactmentConfig;
use crate::scanselect::{DEFAULT_DECIMATION_THRESHOLD, DEFAULT_SUBSET_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Gaussian smoothing of the anchor series, in frames; 0 disables it.
    pub sigma: f64,
    /// Longest run of undetected frames that is interpolated.
    pub max_gap: usize,
    /// Largest accepted rotation change between consecutive frames, radians.
    pub max_rotation_step: f64,
    /// Canonical left eye, right eye and mouth centers as fractions of the
    /// crop side.
    pub anchors: AlignmentAnchors,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            max_gap: 5,
            max_rotation_step: 0.5,
            anchors: toy_canonical_anchors(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("align.sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.max_rotation_step > 0.0) {
            return Err(Error::Config("align.max_rotation_step must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricChoice {
    #[default]
    PixelL2,
    Perceptual {
        name: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub n: usize,
    pub metric: MetricChoice,
    /// Scans longer than this are decimated by a uniform stride.
    pub decimate_above: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_SUBSET_SIZE,
            metric: MetricChoice::PixelL2,
            decimate_above: DEFAULT_DECIMATION_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    pub steps: usize,
    pub step_size: f64,
    pub beta: f64,
    pub sharpness: f64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_size: 1e-3,
            beta: DEFAULT_BETA,
            sharpness: DEFAULT_SHARPNESS,
        }
    }
}

#[derive(Clone, Default, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendChoice {
    /// The analytic toy generator rendering at the canonical resolution.
    #[default]
    Toy,
    /// A reference manifest written by `genbackend::save_external`.
    External { manifest: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterChoice {
    #[default]
    Toy,
    External {
        name: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionChoice {
    /// The mouth-opening direction of the personalized toy generator.
    #[default]
    ToyMouth,
    /// An `EditDirection` JSON document.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub direction: DirectionChoice,
    pub step: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            direction: DirectionChoice::ToyMouth,
            step: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StyleChoice {
    /// The personalized toy generator with its palette inverted.
    #[default]
    ToyInverted,
    /// A toy generator saved with `genbackend::save_toy`.
    ToyDir { path: PathBuf },
    External { manifest: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: usize,
    pub embedder: AdapterChoice,
    pub features: AdapterChoice,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            embedder: AdapterChoice::Toy,
            features: AdapterChoice::Toy,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Artifact root; `REENACT_CACHE` takes precedence when set.
    pub cache_root: Option<PathBuf>,
    pub scan_video: Option<PathBuf>,
    pub driving_video: Option<PathBuf>,
    pub keypoint_table: Option<PathBuf>,
}

/// Everything a run needs, loaded from one JSON or TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    /// Seed for synthetic toy inputs; reenactment noise uses `reenact.seed`.
    pub seed: u64,
    /// Side of the aligned crops and of toy renders.
    pub canonical_resolution: usize,
    pub fps: f64,
    pub codec: VideoCodec,
    pub backend: BackendChoice,
    pub detector: AdapterChoice,
    pub paths: PathsConfig,
    pub align: AlignConfig,
    pub scan: ScanConfig,
    pub personalize: PersonalizeConfig,
    pub reenact: ReenactmentConfig,
    pub edit: EditConfig,
    pub stylize: StyleChoice,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "toy".into(),
            seed: 0,
            canonical_resolution: TOY_RESOLUTION,
            fps: 25.0,
            codec: VideoCodec::Raw,
            backend: BackendChoice::Toy,
            detector: AdapterChoice::Toy,
            paths: PathsConfig::default(),
            align: AlignConfig::default(),
            scan: ScanConfig::default(),
            personalize: PersonalizeConfig::default(),
            reenact: ReenactmentConfig::default(),
            edit: EditConfig::default(),
            stylize: StyleChoice::ToyInverted,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run_name {:?}", self.run_name)));
        }
        if self.canonical_resolution < 8 {
            return Err(Error::Config("canonical_resolution must be at least 8".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("fps must be > 0, got {}", self.fps)));
        }
        if self.scan.n < 2 {
            return Err(Error::Config("scan.n must be at least 2".into()));
        }
        if self.eval.top_k == 0 {
            return Err(Error::Config("eval.top_k must be positive".into()));
        }
        if !(self.personalize.step_size > 0.0) {
            return Err(Error::Config("personalize.step_size must be > 0".into()));
        }
        self.align.validate()?;
        self.reenact.validate()
    }

    /// Parses JSON, or TOML when the extension is `.toml`, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml_str(&text)
        } else {
            Self::from_json_str(&text)
        }
        .map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Artifact root of this run: `<cache>/<run_name>`.
    pub fn run_dir(&self) -> PathBuf {
        let fallback = self
            .paths
            .cache_root
            .clone()
            .unwrap_or_else(|| PathBuf::from("reenact-cache"));
        crate::store::cache_root(fallback).join(&self.run_name)
    }
}
