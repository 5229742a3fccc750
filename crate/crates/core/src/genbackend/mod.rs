//! Generator backends: the abstraction, the analytic toy generator, and
//! fine-tuning of a generator so that anchors reconstruct their targets.

pub mod toy;

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facekit::{select_subset, GroupedKeypoints, KeypointIndexTable};
use crate::latentspace::NativeLatentStack;
use crate::raster::{Raster, Rect};
use crate::scalar::{Dual, Scalar};
use crate::scanselect::DistanceBackend;
use crate::store::{self, Manifest};

use toy::{
    render_params_rect, toy_mesh, toy_params_from_codes, AffineMap, Palette, ToyFace,
    ToyFaceParams, ToyIdentity, ToyParam, PARAM_COUNT, TOY_LAYERS, TOY_RESOLUTION,
};

/// Weight of the pixel term in the personalization loss.
pub const LAMBDA_PIXEL: f64 = 10.0;

/// Layer count and latent width expected of a full-scale face generator.
pub const REAL_LAYERS: usize = 18;
pub const REAL_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub differentiable: bool,
    pub tunable: bool,
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    fn layers(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// Output side length; frames are square.
    fn resolution(&self) -> usize;
    fn capabilities(&self) -> Capabilities;

    /// Renders an `H×W×3` frame in `[0, 1]`.
    fn generate(&self, codes: &NativeLatentStack<f64>) -> Result<Raster<f64>>;

    fn check_codes<T: Scalar>(&self, codes: &NativeLatentStack<T>) -> Result<()>
    where
        Self: Sized,
    {
        if codes.layers() != self.layers() || codes.dim() != self.latent_dim() {
            return Err(Error::DimensionMismatch(format!(
                "backend `{}` expects {} layers of dimension {}, got {} of {}",
                self.id(),
                self.layers(),
                self.latent_dim(),
                codes.layers(),
                codes.dim()
            )));
        }
        Ok(())
    }
}

/// A generator that can be evaluated in any [`Scalar`], together with the
/// keypoints a detector reports on its output.
pub trait DifferentiableGenerator: Generator + Sized {
    /// Renders the pixels of `rect` only.
    fn render_rect<T: Scalar>(&self, codes: &NativeLatentStack<T>, rect: Rect) -> Result<Raster<T>>;

    /// Subset keypoints of the rendered face under `table`.
    fn keypoints<T: Scalar>(
        &self,
        codes: &NativeLatentStack<T>,
        table: &KeypointIndexTable,
    ) -> Result<GroupedKeypoints<T>>;
}

/// A generator whose weights can be fine-tuned on anchor/target pairs.
pub trait TunableGenerator: Generator + Clone {
    fn parameters(&self) -> Vec<f64>;

    fn with_parameters(&self, parameters: &[f64]) -> Result<Self>;

    /// Gradient of `λ_pixel·Σ_i ‖G(w_i) − t_i‖₂` with respect to [`parameters`].
    ///
    /// [`parameters`]: TunableGenerator::parameters
    fn pixel_gradient(&self, pairs: &[TrainingPair], lambda_pixel: f64) -> Result<Vec<f64>>;
}

/// An anchor latent and the training image it should reproduce.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub anchor: Vec<f64>,
    pub target: Raster<f64>,
}

/// The toy face generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    pub id: String,
    pub identity: ToyIdentity,
    pub palette: Palette,
    pub map: AffineMap,
    pub resolution: usize,
}

impl Default for ToyGenerator {
    fn default() -> Self {
        Self::new(ToyIdentity::default())
    }
}

impl ToyGenerator {
    pub fn new(identity: ToyIdentity) -> Self {
        Self {
            id: "toy".into(),
            identity,
            palette: Palette::default(),
            map: AffineMap::default(),
            resolution: TOY_RESOLUTION,
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    /// Same generator with the complementary palette.
    pub fn stylized(&self) -> Self {
        Self {
            id: format!("{}-inverted", self.id),
            palette: self.palette.inverted(),
            ..self.clone()
        }
    }

    pub fn params<T: Scalar>(&self, codes: &NativeLatentStack<T>) -> Result<ToyFaceParams<T>> {
        self.check_codes(codes)?;
        toy_params_from_codes(codes, &self.map)
    }

    pub fn render_params(&self, params: &ToyFaceParams<f64>) -> Raster<f64> {
        toy::toy_render(&self.identity, &self.palette, params, self.resolution)
    }

    /// Anchor for a toy frame: the code whose parameters best match the
    /// frame's, by least squares on the parameter logits.
    ///
    /// The code is shared by all layers. Parameters the map cannot move are
    /// ignored.
    pub fn invert(&self, frame: &Raster<f64>) -> Result<Vec<f64>> {
        let face = frame
            .annotation
            .as_ref()
            .ok_or(Error::NoFaceDetected { frame: None })?;
        let params = face.apparent_params((frame.width(), frame.height()));
        let d = self.map.dim;
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for p in ToyParam::ALL {
            let row = self.map.row(p);
            if row.iter().all(|w| *w == 0.0) {
                continue;
            }
            let (lo, hi) = p.range();
            let unit = ((params.get(p) - lo) / (hi - lo)).clamp(1e-4, 1.0 - 1e-4);
            rows.extend_from_slice(row);
            rhs.push((unit / (1.0 - unit)).ln() - self.map.bias[p.index()]);
        }
        if rhs.is_empty() {
            return Ok(vec![0.0; d]);
        }
        let a = DMatrix::from_row_slice(rhs.len(), d, &rows);
        let b = DVector::from_vec(rhs);
        let svd = a.svd(true, true);
        let w = svd
            .solve(&b, 1e-10)
            .map_err(|e| Error::InvalidParameter(format!("inversion failed: {e}")))?;
        Ok(w.iter().copied().collect())
    }
}

impl Generator for ToyGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn layers(&self) -> usize {
        TOY_LAYERS
    }

    fn latent_dim(&self) -> usize {
        self.map.dim
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            differentiable: true,
            tunable: true,
        }
    }

    fn generate(&self, codes: &NativeLatentStack<f64>) -> Result<Raster<f64>> {
        let params = self.params(codes)?;
        Ok(self.render_params(&params))
    }
}

impl DifferentiableGenerator for ToyGenerator {
    fn render_rect<T: Scalar>(&self, codes: &NativeLatentStack<T>, rect: Rect) -> Result<Raster<T>> {
        let params = self.params(codes)?;
        render_params_rect(&self.identity, &self.palette, &params, self.resolution, rect)
    }

    fn keypoints<T: Scalar>(
        &self,
        codes: &NativeLatentStack<T>,
        table: &KeypointIndexTable,
    ) -> Result<GroupedKeypoints<T>> {
        let params = self.params(codes)?;
        let mesh = toy_mesh(&self.identity, &params, self.resolution, self.resolution)?;
        select_subset(&mesh, table)
    }
}

impl TunableGenerator for ToyGenerator {
    fn parameters(&self) -> Vec<f64> {
        self.map.weights.iter().chain(&self.map.bias).copied().collect()
    }

    fn with_parameters(&self, parameters: &[f64]) -> Result<Self> {
        let nw = self.map.weights.len();
        if parameters.len() != self.map.parameter_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.map.parameter_count(),
                parameters.len()
            )));
        }
        let mut out = self.clone();
        out.map.weights.copy_from_slice(&parameters[..nw]);
        out.map.bias.copy_from_slice(&parameters[nw..]);
        Ok(out)
    }

    fn pixel_gradient(&self, pairs: &[TrainingPair], lambda_pixel: f64) -> Result<Vec<f64>> {
        let d = self.map.dim;
        let full = Rect::new(0, 0, self.resolution, self.resolution);
        let per_pair: Vec<Vec<f64>> = pairs
            .par_iter()
            .map(|pair| -> Result<Vec<f64>> {
                let codes = NativeLatentStack::broadcast(pair.anchor.clone(), TOY_LAYERS)?;
                let params = self.params(&codes)?;
                let image = render_params_rect(&self.identity, &self.palette, &params, self.resolution, full)?;
                check_target(&image, &pair.target)?;
                let residual: Vec<f64> = image
                    .data()
                    .iter()
                    .zip(pair.target.data())
                    .map(|(a, b)| a - b)
                    .collect();
                let norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
                let mut grad = vec![0.0; self.map.parameter_count()];
                if norm == 0.0 {
                    return Ok(grad);
                }
                let nw = self.map.weights.len();
                for p in ToyParam::ALL {
                    let mut dual = params.cast::<Dual>();
                    dual.set(p, Dual::variable(params.get(p)));
                    let di = render_params_rect(&self.identity, &self.palette, &dual, self.resolution, full)?;
                    let dl_dp: f64 = lambda_pixel
                        * residual
                            .iter()
                            .zip(di.data())
                            .map(|(r, v)| r * v.eps)
                            .sum::<f64>()
                        / norm;
                    let (lo, hi) = p.range();
                    let unit = (params.get(p) - lo) / (hi - lo);
                    let dl_dz = dl_dp * (hi - lo) * unit * (1.0 - unit);
                    let j = p.index();
                    for k in 0..d {
                        grad[j * d + k] += dl_dz * pair.anchor[k];
                    }
                    grad[nw + j] += dl_dz;
                }
                Ok(grad)
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; self.map.parameter_count()];
        for g in per_pair {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok(total)
    }
}

fn check_target(image: &Raster<f64>, target: &Raster<f64>) -> Result<()> {
    if !image.same_shape(target) {
        return Err(Error::ShapeMismatch(format!(
            "target {:?} does not match backend output {:?}",
            target.shape(),
            image.shape()
        )));
    }
    Ok(())
}

/// Adapter slot for a full-scale generator whose weights live outside this
/// crate; `weights` is referenced by path and content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalGenerator {
    pub name: String,
    pub weights: PathBuf,
    pub sha256: String,
}

impl Generator for ExternalGenerator {
    fn id(&self) -> &str {
        &self.name
    }

    fn layers(&self) -> usize {
        REAL_LAYERS
    }

    fn latent_dim(&self) -> usize {
        REAL_DIM
    }

    fn resolution(&self) -> usize {
        1024
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            differentiable: false,
            tunable: false,
        }
    }

    fn generate(&self, codes: &NativeLatentStack<f64>) -> Result<Raster<f64>> {
        self.check_codes(codes)?;
        Err(Error::BackendUnavailable(self.name.clone()))
    }
}

/// `Σ_i [perceptual(G(w_i), t_i) + λ_pixel·‖G(w_i) − t_i‖₂]`; a missing
/// perceptual backend contributes zero.
pub fn personalization_loss<G: Generator>(
    backend: &G,
    pairs: &[TrainingPair],
    perceptual: Option<&dyn DistanceBackend>,
    lambda_pixel: f64,
) -> Result<f64> {
    if !backend.capabilities().tunable {
        return Err(Error::BackendNotTunable(backend.id().into()));
    }
    let terms: Vec<f64> = pairs
        .par_iter()
        .map(|pair| -> Result<f64> {
            let codes = NativeLatentStack::broadcast(pair.anchor.clone(), backend.layers())?;
            let image = backend.generate(&codes)?;
            check_target(&image, &pair.target)?;
            let pixel = image
                .data()
                .iter()
                .zip(pair.target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let p = match perceptual {
                Some(metric) => metric.distance(&image, &pair.target)?,
                None => 0.0,
            };
            Ok(p + lambda_pixel * pixel)
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizeReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted_steps: usize,
}

/// Gradient descent on the generator weights with a backtracking line search.
///
/// Each step follows the pixel-term gradient and is halved until the full
/// loss decreases, so the loss never increases. With `steps = 0` the backend
/// is returned unchanged.
pub fn personalize<G: TunableGenerator>(
    backend: &G,
    pairs: &[TrainingPair],
    steps: usize,
    step_size: f64,
    perceptual: Option<&dyn DistanceBackend>,
) -> Result<(G, PersonalizeReport)> {
    let caps = backend.capabilities();
    if !caps.tunable || !caps.differentiable {
        return Err(Error::BackendNotTunable(backend.id().into()));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidParameter(format!("step size {step_size}")));
    }
    let initial_loss = personalization_loss(backend, pairs, perceptual, LAMBDA_PIXEL)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { frame: None });
    }
    let mut current = backend.clone();
    let mut loss = initial_loss;
    let mut accepted = 0;
    let mut eta = step_size;
    for _ in 0..steps {
        let grad = current.pixel_gradient(pairs, LAMBDA_PIXEL)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { frame: None });
        }
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let theta = current.parameters();
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - eta * g).collect();
            let candidate = current.with_parameters(&trial)?;
            let trial_loss = personalization_loss(&candidate, pairs, perceptual, LAMBDA_PIXEL)?;
            if trial_loss.is_finite() && trial_loss < loss {
                current = candidate;
                loss = trial_loss;
                improved = true;
                break;
            }
            eta *= 0.5;
        }
        if !improved {
            break;
        }
        accepted += 1;
        eta = (eta * 1.5).min(step_size);
    }
    Ok((
        current,
        PersonalizeReport {
            initial_loss,
            final_loss: loss,
            accepted_steps: accepted,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyMeta {
    id: String,
    resolution: usize,
    layers: usize,
    dim: usize,
    identity: ToyIdentity,
    palette: Palette,
}

/// Writes the toy generator to `dir/generator.json` with its affine map as
/// float32 blobs.
pub fn save_toy(dir: &Path, generator: &ToyGenerator) -> Result<()> {
    let mut manifest = Manifest::new(
        "toy_generator",
        ToyMeta {
            id: generator.id.clone(),
            resolution: generator.resolution,
            layers: TOY_LAYERS,
            dim: generator.map.dim,
            identity: generator.identity.clone(),
            palette: generator.palette.clone(),
        },
    );
    manifest.blobs.insert(
        "weights".into(),
        store::write_blob(
            dir,
            "weights",
            generator.map.weights.iter().copied(),
            vec![PARAM_COUNT, generator.map.dim],
        )?,
    );
    manifest.blobs.insert(
        "bias".into(),
        store::write_blob(dir, "bias", generator.map.bias.iter().copied(), vec![PARAM_COUNT])?,
    );
    store::write_json(&dir.join("generator.json"), &manifest)
}

pub fn load_toy(dir: &Path) -> Result<ToyGenerator> {
    let path = dir.join("generator.json");
    let manifest: Manifest<ToyMeta> = store::read_manifest(&path, "toy_generator")?;
    let m = manifest.meta;
    if m.layers != TOY_LAYERS {
        return Err(Error::format(&path, format!("toy generator has {TOY_LAYERS} layers")));
    }
    let weights = store::read_blob_f64(dir, manifest.blobs.get("weights").ok_or_else(|| Error::format(&path, "missing weights"))?)?;
    let bias = store::read_blob_f64(dir, manifest.blobs.get("bias").ok_or_else(|| Error::format(&path, "missing bias"))?)?;
    if weights.len() != PARAM_COUNT * m.dim || bias.len() != PARAM_COUNT {
        return Err(Error::format(&path, "affine map blobs have the wrong size"));
    }
    Ok(ToyGenerator {
        id: m.id,
        identity: m.identity,
        palette: m.palette,
        map: AffineMap {
            weights,
            bias,
            dim: m.dim,
        },
        resolution: m.resolution,
    })
}

pub fn save_external(path: &Path, generator: &ExternalGenerator) -> Result<()> {
    store::write_json(path, &Manifest::new("external_generator", generator.clone()))
}

/// Loads an external generator reference, verifying its weights' hash.
pub fn load_external(path: &Path) -> Result<ExternalGenerator> {
    let manifest: Manifest<ExternalGenerator> = store::read_manifest(path, "external_generator")?;
    let g = manifest.meta;
    if !g.weights.exists() {
        return Err(Error::MissingArtifact(g.weights));
    }
    if store::file_hash(&g.weights)? != g.sha256 {
        return Err(Error::HashMismatch(g.weights));
    }
    Ok(g)
}

/// The toy annotation of a frame, if it has one.
pub fn toy_face(frame: &Raster<f64>) -> Option<&ToyFace> {
    frame.annotation.as_ref()
}
