//! Per-frame latent optimization of the reenactment objective, and the
//! warm-start and smoothing machinery over the resulting trajectory.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facekit::{
    describe, harmonize_rects, keypoint_loss, region_pixel_loss, region_points, region_rect,
    select_subset, DescriptorMode, GroupedKeypoints, KeypointDetector, KeypointIndexTable,
    MouthSource, NormalizedKeypointDescriptor, Region,
};
use crate::genbackend::DifferentiableGenerator;
use crate::latentspace::{
    center, contains, delta_regularizer, finalize, softplus_shifted_grad, sum_regularizer,
    to_native, LatentForm, NativeLatentStack, PersonalizedLatent, PersonalizedSpace,
};
use crate::raster::Raster;
use crate::scalar::{Dual, Scalar};
use crate::store::{self, Manifest};

/// Hull tolerance every stored trajectory latent satisfies.
pub const TRAJECTORY_TOLERANCE: f64 = 1e-5;

/// Loss reduction below which a frame is reported as [`FrameStatus::NoProgress`].
pub const NO_PROGRESS_THRESHOLD: f64 = 1e-12;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// How frame `t > 0` is initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Noisy copy of the previous frame's result.
    #[default]
    WarmStart,
    /// Noisy copy of the subspace center, independent of other frames.
    IndependentCenter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReenactmentConfig {
    pub lambda_mouth: f64,
    pub lambda_eyes: f64,
    pub lambda_delta: f64,
    pub lambda_sum: f64,
    pub steps: usize,
    /// Adam learning rate at the first step.
    pub step_size: f64,
    /// Learning rate at the last step as a fraction of `step_size`; the rate
    /// decays geometrically in between.
    pub step_decay: f64,
    pub sigma_init: f64,
    pub sigma_traj: f64,
    pub seed: u64,
    pub descriptor_mode: DescriptorMode,
    pub mouth_source: MouthSource,
    pub init_mode: InitMode,
}

impl Default for ReenactmentConfig {
    fn default() -> Self {
        Self {
            lambda_mouth: 1.0,
            lambda_eyes: 1.0,
            lambda_delta: 10.0,
            lambda_sum: 10.0,
            steps: 150,
            step_size: 0.02,
            step_decay: 0.05,
            sigma_init: 0.05,
            sigma_traj: 2.0,
            seed: 0,
            descriptor_mode: DescriptorMode::Normalized,
            mouth_source: MouthSource::Inner,
            init_mode: InitMode::WarmStart,
        }
    }
}

impl ReenactmentConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_mouth", self.lambda_mouth),
            ("lambda_eyes", self.lambda_eyes),
            ("lambda_delta", self.lambda_delta),
            ("lambda_sum", self.lambda_sum),
            ("sigma_init", self.sigma_init),
            ("sigma_traj", self.sigma_traj),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::Config(format!(
                "step_decay must lie in (0, 1], got {}",
                self.step_decay
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step_size must be finite and > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// The image generated from the subspace center, with its keypoints.
#[derive(Clone, Debug)]
pub struct IdentityReference {
    pub raster: Raster<f64>,
    pub keypoints: GroupedKeypoints<f64>,
}

impl IdentityReference {
    pub fn new<G: DifferentiableGenerator>(
        space: &PersonalizedSpace,
        backend: &G,
        table: &KeypointIndexTable,
    ) -> Result<Self> {
        let codes = to_native(&center(space), space)?;
        Ok(Self {
            raster: backend.generate(&codes)?,
            keypoints: backend.keypoints(&codes, table)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FrameObjectiveInputs {
    pub descriptor: NormalizedKeypointDescriptor<f64>,
    pub driving: Raster<f64>,
    pub driving_keypoints: GroupedKeypoints<f64>,
    pub reference: Raster<f64>,
    pub reference_keypoints: GroupedKeypoints<f64>,
    /// The table behind every keypoint set above and behind generated keypoints.
    pub table: KeypointIndexTable,
}

impl FrameObjectiveInputs {
    pub fn new(
        driving: Raster<f64>,
        driving_keypoints: GroupedKeypoints<f64>,
        reference: &IdentityReference,
        table: &KeypointIndexTable,
        mode: DescriptorMode,
    ) -> Result<Self> {
        if driving_keypoints.len() != table.total()
            || reference.keypoints.len() != table.total()
        {
            return Err(Error::ShapeMismatch(format!(
                "keypoint sets of {} and {} points for a table of {}",
                driving_keypoints.len(),
                reference.keypoints.len(),
                table.total()
            )));
        }
        Ok(Self {
            descriptor: describe(&driving_keypoints, mode),
            driving,
            driving_keypoints,
            reference: reference.raster.clone(),
            reference_keypoints: reference.keypoints.clone(),
            table: table.clone(),
        })
    }

    /// Detects keypoints on `driving` and builds the inputs for it.
    pub fn detect(
        driving: Raster<f64>,
        detector: &dyn KeypointDetector,
        reference: &IdentityReference,
        table: &KeypointIndexTable,
        mode: DescriptorMode,
    ) -> Result<Self> {
        let frame = crate::facekit::extract_keypoints(&driving, detector)?;
        let gk = select_subset(&frame, table)?;
        Self::new(driving, gk, reference, table, mode)
    }
}

/// Loss terms before weighting, and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T = f64> {
    pub key: T,
    pub mouth: T,
    pub eyes: T,
    pub delta: T,
    pub sum: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    fn assemble(key: T, mouth: T, eyes: T, delta: T, sum: T, cfg: &ReenactmentConfig) -> Self {
        let c = T::cst;
        let total = key
            + c(cfg.lambda_mouth) * mouth
            + c(cfg.lambda_eyes) * eyes
            + c(cfg.lambda_delta) * delta
            + c(cfg.lambda_sum) * sum;
        Self {
            key,
            mouth,
            eyes,
            delta,
            sum,
            total,
        }
    }

    pub fn to_f64(&self) -> LossBreakdown<f64> {
        LossBreakdown {
            key: self.key.re(),
            mouth: self.mouth.re(),
            eyes: self.eyes.re(),
            delta: self.delta.re(),
            sum: self.sum.re(),
            total: self.total.re(),
        }
    }
}

/// Harmonized pixel loss between the generated `region` and the same region
/// of `target`. Crop rectangles come from primal keypoint values.
fn region_term<T: Scalar, G: DifferentiableGenerator>(
    backend: &G,
    codes: &NativeLatentStack<T>,
    generated: &GroupedKeypoints<T>,
    target: &Raster<f64>,
    target_keypoints: &GroupedKeypoints<f64>,
    region: Region,
    mouth: MouthSource,
) -> Result<T> {
    let res = backend.resolution();
    let rg = region_rect(region_points(generated, region, mouth)?, res, res, region)?;
    let rt = region_rect(
        region_points(target_keypoints, region, mouth)?,
        target.width(),
        target.height(),
        region,
    )?;
    let (rg, rt) = harmonize_rects(rg, rt);
    let patch = backend.render_rect(codes, rg)?;
    region_pixel_loss(&patch, &target.crop(rt)?.cast::<T>())
}

/// `(L_key, L_mouth, L_eyes)` for native codes.
fn code_terms<T: Scalar, G: DifferentiableGenerator>(
    codes: &NativeLatentStack<T>,
    inputs: &FrameObjectiveInputs,
    backend: &G,
    cfg: &ReenactmentConfig,
) -> Result<(T, T, T)> {
    let gk = backend.keypoints(codes, &inputs.table)?;
    let key = keypoint_loss(
        &inputs.descriptor.cast::<T>(),
        &describe(&gk, inputs.descriptor.mode()),
    )?;
    let mouth = if cfg.lambda_mouth > 0.0 {
        region_term(
            backend,
            codes,
            &gk,
            &inputs.driving,
            &inputs.driving_keypoints,
            Region::Mouth,
            cfg.mouth_source,
        )?
    } else {
        T::zero()
    };
    let mut eyes = T::zero();
    if cfg.lambda_eyes > 0.0 {
        for region in [Region::LeftEye, Region::RightEye] {
            eyes += region_term(
                backend,
                codes,
                &gk,
                &inputs.reference,
                &inputs.reference_keypoints,
                region,
                cfg.mouth_source,
            )?;
        }
    }
    Ok((key, mouth, eyes))
}

/// The full objective at `pl`, generic over the scalar type.
pub fn full_loss<T: Scalar, G: DifferentiableGenerator>(
    pl: &PersonalizedLatent<T>,
    inputs: &FrameObjectiveInputs,
    space: &PersonalizedSpace,
    backend: &G,
    cfg: &ReenactmentConfig,
) -> Result<LossBreakdown<T>> {
    let codes = to_native(pl, space)?;
    let (key, mouth, eyes) = code_terms(&codes, inputs, backend, cfg)?;
    let delta = delta_regularizer(&pl.deltas);
    let sum = sum_regularizer(&pl.alpha_tilde(space));
    let out = LossBreakdown::assemble(key, mouth, eyes, delta, sum, cfg);
    if !out.total.is_finite() {
        return Err(Error::NonFiniteLoss { frame: None });
    }
    Ok(out)
}

/// Gradient with respect to the stored `alpha` and `deltas` of a latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGradient {
    pub alpha: Vec<f64>,
    pub deltas: Vec<Vec<f64>>,
}

/// [`full_loss`] and its gradient.
///
/// The code-dependent terms are differentiated with one forward-mode pass per
/// native code coordinate; the linear map to codes and the regularizers are
/// differentiated in closed form.
pub fn loss_and_gradient<G: DifferentiableGenerator>(
    pl: &PersonalizedLatent<f64>,
    inputs: &FrameObjectiveInputs,
    space: &PersonalizedSpace,
    backend: &G,
    cfg: &ReenactmentConfig,
) -> Result<(LossBreakdown<f64>, LatentGradient)> {
    let breakdown = full_loss(pl, inputs, space, backend, cfg)?;
    let codes = to_native(pl, space)?;
    let (layers, dim) = (codes.layers(), codes.dim());
    let lifted = codes.cast::<Dual>();
    let code_grad = (0..layers * dim)
        .into_par_iter()
        .map(|k| {
            let mut seeded = lifted.clone();
            let v = &mut seeded.layer_mut(k / dim)[k % dim];
            *v = Dual::variable(v.re);
            let (key, mouth, eyes) = code_terms(&seeded, inputs, backend, cfg)?;
            Ok((key + Dual::cst(cfg.lambda_mouth) * mouth + Dual::cst(cfg.lambda_eyes) * eyes).eps)
        })
        .collect::<Result<Vec<f64>>>()?;

    let anchors = space.anchor_set().anchors();
    let coef_grad: Vec<Vec<f64>> = code_grad
        .chunks_exact(dim)
        .map(|g| {
            anchors
                .iter()
                .map(|w| g.iter().zip(w).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();

    let alpha_tilde = pl.alpha_tilde(space);
    let sum_grad = 2.0 * cfg.lambda_sum * (alpha_tilde.iter().sum::<f64>() - 1.0);
    let alpha = (0..pl.n())
        .map(|i| {
            let outer = match pl.form {
                LatentForm::Raw => {
                    softplus_shifted_grad(pl.alpha[i], space.beta(), space.sharpness())
                }
                LatentForm::Effective => 1.0,
            };
            (coef_grad.iter().map(|g| g[i]).sum::<f64>() + sum_grad) * outer
        })
        .collect();
    let deltas = pl
        .deltas
        .iter()
        .zip(&coef_grad)
        .map(|(d, g)| {
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter()
                .zip(g)
                .map(|(v, gi)| {
                    if norm > 0.0 {
                        gi + cfg.lambda_delta * v / norm
                    } else {
                        *gi
                    }
                })
                .collect()
        })
        .collect();
    let grad = LatentGradient { alpha, deltas };
    if !grad.alpha.iter().chain(grad.deltas.iter().flatten()).all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss { frame: None });
    }
    Ok((breakdown, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Improved,
    /// Loss fell by less than [`NO_PROGRESS_THRESHOLD`]; the result is still valid.
    NoProgress,
}

#[derive(Clone, Debug)]
pub struct FrameOutcome {
    /// Finalized, in effective form.
    pub latent: PersonalizedLatent<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub breakdown: LossBreakdown<f64>,
    pub status: FrameStatus,
}

fn flatten(pl: &PersonalizedLatent<f64>) -> Vec<f64> {
    pl.alpha.iter().chain(pl.deltas.iter().flatten()).copied().collect()
}

fn unflatten(x: &[f64], n: usize, layers: usize) -> PersonalizedLatent<f64> {
    PersonalizedLatent {
        alpha: x[..n].to_vec(),
        deltas: x[n..].chunks_exact(n).take(layers).map(<[f64]>::to_vec).collect(),
        form: LatentForm::Raw,
    }
}

/// Adam on raw `α` and all `Δ_l`, renormalizing after every step, returning
/// the best finalized iterate.
pub fn optimize_frame<G: DifferentiableGenerator>(
    inputs: &FrameObjectiveInputs,
    space: &PersonalizedSpace,
    backend: &G,
    cfg: &ReenactmentConfig,
    init: &PersonalizedLatent<f64>,
) -> Result<FrameOutcome> {
    cfg.validate()?;
    init.check(space)?;
    let start = finalize(init, space)?;
    let first = full_loss(&start, inputs, space, backend, cfg)?;
    let mut best = (start, first);

    let (n, layers) = (space.n(), space.layers());
    let mut x = flatten(&init.to_raw(space));
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    for step in 1..=cfg.steps {
        let pl = unflatten(&x, n, layers);
        let (_, grad) = loss_and_gradient(&pl, inputs, space, backend, cfg)?;
        let g: Vec<f64> = grad.alpha.into_iter().chain(grad.deltas.into_iter().flatten()).collect();
        let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
        let progress = (step - 1) as f64 / (cfg.steps.max(2) - 1) as f64;
        let lr = cfg.step_size * cfg.step_decay.powf(progress);
        for k in 0..x.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            x[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
        // Renormalize every iterate, not only the result, so the fit is
        // made on the constraint surface that finalize() projects onto.
        let candidate = match finalize(&unflatten(&x, n, layers), space) {
            Ok(c) => c,
            Err(Error::DegenerateSum(_)) => continue,
            Err(e) => return Err(e),
        };
        x = flatten(&candidate.to_raw(space));
        let loss = full_loss(&candidate, inputs, space, backend, cfg)?;
        if loss.total < best.1.total {
            best = (candidate, loss);
        }
    }

    let (latent, breakdown) = best;
    let status = if first.total - breakdown.total < NO_PROGRESS_THRESHOLD {
        FrameStatus::NoProgress
    } else {
        FrameStatus::Improved
    };
    Ok(FrameOutcome {
        latent,
        initial_loss: first.total,
        final_loss: breakdown.total,
        breakdown,
        status,
    })
}

/// Adds `N(0, σ²)` noise to every entry of `α`, leaving `Δ` and the form as is.
pub fn noisy_init(prev: &PersonalizedLatent<f64>, sigma: f64, seed: u64) -> Result<PersonalizedLatent<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = prev.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in &mut out.alpha {
        *a += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Per-frame noise seed derived from the run seed.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed.wrapping_add(frame as u64)
}

/// Normalized Gaussian taps of radius `round(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma + 0.5).floor() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Index into `0..n` under half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Convolves each series in `series` (frames × values) with `kernel`.
pub fn smooth_series(series: &[Vec<f64>], kernel: &[f64]) -> Vec<Vec<f64>> {
    let t = series.len();
    let radius = (kernel.len() / 2) as i64;
    (0..t)
        .map(|i| {
            // Accumulating offsets from the center sample keeps constant
            // series exact despite rounding in the kernel sum.
            let center = &series[i];
            let mut acc = vec![0.0; center.len()];
            for (k, w) in kernel.iter().enumerate() {
                let src = &series[reflect(i as i64 + k as i64 - radius, t)];
                for ((a, s), c) in acc.iter_mut().zip(src).zip(center) {
                    *a += w * (s - c);
                }
            }
            acc.iter().zip(center).map(|(a, c)| c + a).collect()
        })
        .collect()
}

/// Per-frame results of a reenactment run.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub latents: Vec<PersonalizedLatent<f64>>,
    pub config: ReenactmentConfig,
    pub losses: Vec<f64>,
    pub space_fingerprint: String,
}

impl LatentTrajectory {
    pub fn new(config: ReenactmentConfig, space: &PersonalizedSpace) -> Self {
        Self {
            latents: Vec::new(),
            config,
            losses: Vec::new(),
            space_fingerprint: space.fingerprint(),
        }
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Checks lengths, the space fingerprint, and hull membership of every latent.
    pub fn validate(&self, space: &PersonalizedSpace) -> Result<()> {
        if self.losses.len() != self.latents.len() {
            return Err(Error::LengthMismatch(self.latents.len(), self.losses.len()));
        }
        if self.space_fingerprint != space.fingerprint() {
            return Err(Error::Config("trajectory was produced for a different space".into()));
        }
        if let Some(t) = self
            .latents
            .iter()
            .position(|pl| !contains(space, pl, TRAJECTORY_TOLERANCE))
        {
            return Err(Error::InvalidParameter(format!("frame {t} leaves the personalized space")));
        }
        Ok(())
    }
}

/// Gaussian low-pass over frame index applied to effective `α` and every `Δ_l`.
pub fn smooth_trajectory(traj: &LatentTrajectory, sigma: f64) -> Result<LatentTrajectory> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("smoothing sigma must be >= 0, got {sigma}")));
    }
    if traj.latents.iter().any(|pl| pl.form != LatentForm::Effective) {
        return Err(Error::InvalidParameter("smoothing needs effective-form latents".into()));
    }
    if traj.is_empty() || sigma == 0.0 {
        return Ok(traj.clone());
    }
    let (n, layers) = (traj.latents[0].n(), traj.latents[0].layers());
    if traj.latents.iter().any(|pl| pl.n() != n || pl.layers() != layers) {
        return Err(Error::DimensionMismatch("trajectory latents differ in shape".into()));
    }
    let series: Vec<Vec<f64>> = traj.latents.iter().map(flatten).collect();
    let smoothed = smooth_series(&series, &gaussian_kernel(sigma));
    let latents = smoothed
        .iter()
        .map(|x| PersonalizedLatent {
            form: LatentForm::Effective,
            ..unflatten(x, n, layers)
        })
        .collect();
    Ok(LatentTrajectory {
        latents,
        ..traj.clone()
    })
}

/// Everything one reenactment run needs besides the driving frames.
pub struct ReenactSession<'a, G> {
    pub space: &'a PersonalizedSpace,
    pub backend: &'a G,
    pub detector: &'a dyn KeypointDetector,
    pub table: &'a KeypointIndexTable,
    pub config: &'a ReenactmentConfig,
}

#[derive(Clone, Debug)]
pub struct ReenactmentResult {
    /// Per-frame optimizer results before smoothing.
    pub optimized: LatentTrajectory,
    pub smoothed: LatentTrajectory,
    pub rasters: Vec<Raster<f64>>,
    pub statuses: Vec<FrameStatus>,
}

/// Reenacts `frames` frame by frame, then smooths and renders the trajectory.
///
/// `resume` continues a partial per-frame trajectory from an earlier run with
/// the same space and config. `on_frame` sees the per-frame trajectory after
/// every newly optimized frame, e.g. to persist it.
pub fn reenact_video<G: DifferentiableGenerator>(
    session: &ReenactSession<'_, G>,
    frames: &[Raster<f64>],
    resume: Option<&LatentTrajectory>,
    mut on_frame: impl FnMut(&LatentTrajectory) -> Result<()>,
) -> Result<ReenactmentResult> {
    let ReenactSession {
        space,
        backend,
        detector,
        table,
        config: cfg,
    } = *session;
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyInput("no driving frames".into()));
    }
    let mut traj = match resume {
        Some(prev) => {
            prev.validate(space)?;
            if prev.config != *cfg {
                return Err(Error::Config("resume trajectory has a different config".into()));
            }
            if prev.len() > frames.len() {
                return Err(Error::LengthMismatch(prev.len(), frames.len()));
            }
            prev.clone()
        }
        None => LatentTrajectory::new(cfg.clone(), space),
    };
    let mut statuses = vec![FrameStatus::Improved; traj.len()];
    let reference = IdentityReference::new(space, backend, table)?;
    let origin = center(space);

    for (t, frame) in frames.iter().enumerate().skip(traj.len()) {
        let tag = |e: Error| match e {
            Error::NoFaceDetected { .. } => Error::NoFaceDetected { frame: Some(t) },
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { frame: Some(t) },
            other => other,
        };
        let inputs = FrameObjectiveInputs::detect(
            frame.clone(),
            detector,
            &reference,
            table,
            cfg.descriptor_mode,
        )
        .map_err(tag)?;
        let seed = frame_seed(cfg.seed, t);
        let init = match (t, cfg.init_mode, traj.latents.last()) {
            (0, _, _) | (_, InitMode::WarmStart, None) => origin.clone(),
            (_, InitMode::WarmStart, Some(prev)) => noisy_init(prev, cfg.sigma_init, seed)?,
            (_, InitMode::IndependentCenter, _) => noisy_init(&origin, cfg.sigma_init, seed)?,
        };
        let outcome = optimize_frame(&inputs, space, backend, cfg, &init).map_err(tag)?;
        traj.latents.push(outcome.latent);
        traj.losses.push(outcome.final_loss);
        statuses.push(outcome.status);
        on_frame(&traj)?;
    }

    let smoothed = smooth_trajectory(&traj, cfg.sigma_traj)?;
    let rasters = smoothed
        .latents
        .iter()
        .map(|pl| backend.generate(&to_native(pl, space)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReenactmentResult {
        optimized: traj,
        smoothed,
        rasters,
        statuses,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryMeta {
    frames: usize,
    n: usize,
    layers: usize,
    config: ReenactmentConfig,
    losses: Vec<f64>,
    space_fingerprint: String,
}

/// Writes `dir/<name>.json` plus `alpha` and `deltas` float32 blobs.
pub fn save_trajectory(dir: &Path, name: &str, traj: &LatentTrajectory) -> Result<()> {
    let frames = traj.len();
    let n = traj.latents.first().map_or(0, PersonalizedLatent::n);
    let layers = traj.latents.first().map_or(0, PersonalizedLatent::layers);
    if traj.latents.iter().any(|pl| pl.form != LatentForm::Effective) {
        return Err(Error::InvalidParameter("only effective-form trajectories are stored".into()));
    }
    let mut manifest = Manifest::new(
        "latent_trajectory",
        TrajectoryMeta {
            frames,
            n,
            layers,
            config: traj.config.clone(),
            losses: traj.losses.clone(),
            space_fingerprint: traj.space_fingerprint.clone(),
        },
    );
    manifest.blobs.insert(
        "alpha".into(),
        store::write_blob(
            dir,
            &format!("{name}.alpha"),
            traj.latents.iter().flat_map(|pl| pl.alpha.iter().copied()),
            vec![frames, n],
        )?,
    );
    manifest.blobs.insert(
        "deltas".into(),
        store::write_blob(
            dir,
            &format!("{name}.deltas"),
            traj.latents.iter().flat_map(|pl| pl.deltas.iter().flatten().copied()),
            vec![frames, layers, n],
        )?,
    );
    store::write_json(&dir.join(format!("{name}.json")), &manifest)
}

pub fn load_trajectory(dir: &Path, name: &str) -> Result<LatentTrajectory> {
    let path = dir.join(format!("{name}.json"));
    let manifest: Manifest<TrajectoryMeta> = store::read_manifest(&path, "latent_trajectory")?;
    let m = manifest.meta;
    let alpha = store::read_blob_f64(dir, manifest.blobs.get("alpha").ok_or_else(|| Error::format(&path, "missing alpha blob"))?)?;
    let deltas = store::read_blob_f64(dir, manifest.blobs.get("deltas").ok_or_else(|| Error::format(&path, "missing deltas blob"))?)?;
    if alpha.len() != m.frames * m.n
        || deltas.len() != m.frames * m.layers * m.n
        || m.losses.len() != m.frames
    {
        return Err(Error::format(&path, "trajectory blobs disagree with meta"));
    }
    let latents = (0..m.frames)
        .map(|t| {
            let a = alpha[t * m.n..(t + 1) * m.n].to_vec();
            let d = deltas[t * m.layers * m.n..(t + 1) * m.layers * m.n]
                .chunks_exact(m.n.max(1))
                .map(<[f64]>::to_vec)
                .collect();
            PersonalizedLatent::effective(a, d)
        })
        .collect();
    Ok(LatentTrajectory {
        latents,
        config: m.config,
        losses: m.losses,
        space_fingerprint: m.space_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genbackend::toy::ToyKeypointDetector;
    use crate::genbackend::{Generator, ToyGenerator};
    use crate::latentspace::AnchorSet;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_space(n: usize, seed: u64) -> PersonalizedSpace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = (0..n)
            .map(|_| (0..8).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        PersonalizedSpace::with_defaults(AnchorSet::new(anchors).unwrap(), 4).unwrap()
    }

    fn inputs_for(
        pl: &PersonalizedLatent<f64>,
        space: &PersonalizedSpace,
        g: &ToyGenerator,
    ) -> FrameObjectiveInputs {
        let table = KeypointIndexTable::default();
        let frame = g.generate(&to_native(pl, space).unwrap()).unwrap();
        let reference = IdentityReference::new(space, g, &table).unwrap();
        FrameObjectiveInputs::detect(frame, &ToyKeypointDetector, &reference, &table, DescriptorMode::Normalized)
            .unwrap()
    }

    fn random_latent(space: &PersonalizedSpace, rng: &mut ChaCha8Rng, spread: f64) -> PersonalizedLatent<f64> {
        let n = space.n();
        PersonalizedLatent {
            alpha: (0..n).map(|_| 1.0 / n as f64 + rng.random_range(-spread..spread)).collect(),
            deltas: (0..space.layers())
                .map(|_| (0..n).map(|_| rng.random_range(-spread..spread) * 0.2).collect())
                .collect(),
            form: LatentForm::Raw,
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ReenactmentConfig::default();
        assert_eq!((cfg.lambda_mouth, cfg.lambda_eyes, cfg.lambda_delta, cfg.lambda_sum), (1.0, 1.0, 10.0, 10.0));
        assert_eq!((cfg.sigma_init, cfg.sigma_traj), (0.05, 2.0));
        cfg.validate().unwrap();
        let bad = ReenactmentConfig { lambda_delta: -1.0, ..cfg.clone() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ReenactmentConfig { sigma_traj: -0.1, ..cfg };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<ReenactmentConfig>(r#"{"lambda_crop": 1}"#).is_err());
        let partial: ReenactmentConfig = serde_json::from_str(r#"{"steps": 3}"#).unwrap();
        assert_eq!(partial.steps, 3);
    }

    #[test]
    fn loss_vanishes_at_the_generating_latent() {
        let space = toy_space(6, 1);
        let g = ToyGenerator::default();
        let c = center(&space);
        let inputs = inputs_for(&c, &space, &g);
        let b = full_loss(&c, &inputs, &space, &g, &ReenactmentConfig::default()).unwrap();
        assert_eq!((b.key, b.mouth, b.eyes, b.delta), (0.0, 0.0, 0.0, 0.0));
        // Σ 1/6 over six anchors is one up to rounding.
        assert!(b.sum < 1e-30 && b.total < 1e-29);
    }

    #[test]
    fn zero_weights_leave_keypoint_term() {
        let space = toy_space(6, 2);
        let g = ToyGenerator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = inputs_for(&random_latent(&space, &mut rng, 0.1), &space, &g);
        let cfg = ReenactmentConfig {
            lambda_mouth: 0.0,
            lambda_eyes: 0.0,
            lambda_delta: 0.0,
            lambda_sum: 0.0,
            ..Default::default()
        };
        let b = full_loss(&random_latent(&space, &mut rng, 0.1), &inputs, &space, &g, &cfg).unwrap();
        assert!(b.key > 0.0);
        assert_eq!(b.total, b.key);
    }

    #[test]
    fn breakdown_matches_module_level_terms() {
        let space = toy_space(5, 4);
        let g = ToyGenerator::default();
        let table = KeypointIndexTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ReenactmentConfig::default();
        for _ in 0..5 {
            let inputs = inputs_for(&random_latent(&space, &mut rng, 0.15), &space, &g);
            let pl = random_latent(&space, &mut rng, 0.15);
            let b = full_loss(&pl, &inputs, &space, &g, &cfg).unwrap();

            let codes = to_native(&pl, &space).unwrap();
            let frame = g.generate(&codes).unwrap();
            let gk = g.keypoints(&codes, &table).unwrap();
            let key = keypoint_loss(&inputs.descriptor, &describe(&gk, DescriptorMode::Normalized)).unwrap();
            let pixel = |target: &Raster<f64>, tk: &GroupedKeypoints<f64>, region| {
                let a = crate::facekit::crop_region(&frame, &gk, region).unwrap();
                let b = crate::facekit::crop_region(target, tk, region).unwrap();
                let (pa, pb) = crate::facekit::harmonize_crops(&a, &b).unwrap();
                region_pixel_loss(&pa, &pb).unwrap()
            };
            let mouth = pixel(&inputs.driving, &inputs.driving_keypoints, Region::Mouth);
            let eyes = pixel(&inputs.reference, &inputs.reference_keypoints, Region::LeftEye)
                + pixel(&inputs.reference, &inputs.reference_keypoints, Region::RightEye);
            let delta = delta_regularizer(&pl.deltas);
            let sum = sum_regularizer(&pl.alpha_tilde(&space));
            let total = key + mouth + eyes + 10.0 * delta + 10.0 * sum;

            for (x, y) in [(b.key, key), (b.mouth, mouth), (b.eyes, eyes), (b.delta, delta), (b.sum, sum)] {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
            }
            assert!((b.total - total).abs() <= 1e-9 * total);
        }
    }

    #[test]
    fn split_gradient_matches_direct_forward_mode() {
        let space = toy_space(4, 6);
        let g = ToyGenerator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ReenactmentConfig::default();
        let inputs = inputs_for(&random_latent(&space, &mut rng, 0.2), &space, &g);
        let pl = random_latent(&space, &mut rng, 0.2);
        let (_, grad) = loss_and_gradient(&pl, &inputs, &space, &g, &cfg).unwrap();
        let flat = flatten(&pl);
        let direct: Vec<f64> = (0..flat.len())
            .map(|k| {
                let mut seeded: Vec<Dual> = flat.iter().map(|v| Dual::constant(*v)).collect();
                seeded[k] = Dual::variable(flat[k]);
                let lat = PersonalizedLatent {
                    alpha: seeded[..4].to_vec(),
                    deltas: seeded[4..].chunks(4).map(<[Dual]>::to_vec).collect(),
                    form: LatentForm::Raw,
                };
                full_loss(&lat, &inputs, &space, &g, &cfg).unwrap().total.eps
            })
            .collect();
        let split: Vec<f64> = grad.alpha.iter().chain(grad.deltas.iter().flatten()).copied().collect();
        for (a, b) in split.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_steps_return_finalized_init() {
        let space = toy_space(5, 8);
        let g = ToyGenerator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = inputs_for(&random_latent(&space, &mut rng, 0.1), &space, &g);
        let init = random_latent(&space, &mut rng, 0.1);
        let cfg = ReenactmentConfig { steps: 0, ..Default::default() };
        let out = optimize_frame(&inputs, &space, &g, &cfg, &init).unwrap();
        assert_eq!(out.latent, finalize(&init, &space).unwrap());
        assert_eq!(out.status, FrameStatus::NoProgress);
        assert_eq!(out.initial_loss, out.final_loss);
    }

    #[test]
    fn optimizer_never_increases_loss_and_stays_in_space() {
        let space = toy_space(6, 10);
        let g = ToyGenerator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = random_latent(&space, &mut rng, 0.1);
        let inputs = inputs_for(&target, &space, &g);
        let cfg = ReenactmentConfig { steps: 20, ..Default::default() };
        let out = optimize_frame(&inputs, &space, &g, &cfg, &center(&space)).unwrap();
        assert!(out.final_loss <= out.initial_loss);
        assert!(out.final_loss < out.initial_loss);
        assert!(contains(&space, &out.latent, 1e-9));
    }

    #[test]
    fn noise_is_seeded_and_leaves_deltas() {
        let space = toy_space(5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pl = finalize(&random_latent(&space, &mut rng, 0.1), &space).unwrap();
        assert_eq!(noisy_init(&pl, 0.0, 1).unwrap(), pl);
        let a = noisy_init(&pl, 0.05, 42).unwrap();
        assert_eq!(a, noisy_init(&pl, 0.05, 42).unwrap());
        assert_ne!(a, noisy_init(&pl, 0.05, 43).unwrap());
        assert_eq!(a.deltas, pl.deltas);
        assert_ne!(a.alpha, pl.alpha);
        assert!(noisy_init(&pl, -1.0, 0).is_err());
    }

    #[test]
    fn noise_has_requested_deviation() {
        let pl = PersonalizedLatent::effective(vec![0.0; 20_000], vec![]);
        let a = noisy_init(&pl, 0.05, 7).unwrap().alpha;
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let sd = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!(mean.abs() < 2e-3 && (sd - 0.05).abs() < 2e-3, "{mean} {sd}");
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 17);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
        for i in 0..8 {
            assert_eq!(k[i], k[16 - i]);
        }
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        // Taps recomputed here from the unnormalized Gaussian at σ = 1.5 (radius 6).
        let raw: Vec<f64> = (-6..=6).map(|i: i32| (-(i * i) as f64 / 4.5).exp()).collect();
        let total: f64 = raw.iter().sum();
        let mut series = vec![vec![0.0]; 31];
        series[15][0] = 1.0;
        let out = smooth_series(&series, &gaussian_kernel(1.5));
        for (t, v) in out.iter().enumerate() {
            let expected = if (9..=21).contains(&t) { raw[t - 9] / total } else { 0.0 };
            assert!((v[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn reflect_boundary_matches_half_sample_symmetry() {
        assert_eq!(
            (-4..8).map(|i| reflect(i, 4)).collect::<Vec<_>>(),
            vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]
        );
        // Series shorter than the kernel: reflection repeats.
        assert_eq!(reflect(-9, 3), 2);
        // [1, 2, 3] with taps [1/4, 1/2, 1/4]: the edges see their own value.
        let out = smooth_series(&[vec![1.0], vec![2.0], vec![3.0]], &[0.25, 0.5, 0.25]);
        assert_eq!(out, vec![vec![1.25], vec![2.0], vec![2.75]]);
    }

    fn trajectory(values: Vec<Vec<f64>>) -> LatentTrajectory {
        let space = toy_space(3, 0);
        let mut t = LatentTrajectory::new(ReenactmentConfig::default(), &space);
        for v in values {
            t.losses.push(0.0);
            t.latents.push(PersonalizedLatent::effective(v[..3].to_vec(), vec![v[3..].to_vec()]));
        }
        t
    }

    #[test]
    fn constant_trajectory_is_a_fixed_point() {
        let traj = trajectory(vec![vec![0.2, 0.3, 0.5, 0.01, -0.02, 0.01]; 12]);
        let out = smooth_trajectory(&traj, 2.0).unwrap();
        for pl in &out.latents {
            for (a, b) in flatten(pl).iter().zip(flatten(&traj.latents[0]).iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn raw_latents_are_not_smoothed() {
        let mut traj = trajectory(vec![vec![0.2, 0.3, 0.5, 0.0, 0.0, 0.0]; 3]);
        traj.latents[1].form = LatentForm::Raw;
        assert!(smooth_trajectory(&traj, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn smoothing_commutes_with_reversal(
            values in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 6), 1..20),
            sigma in 0.0..4.0f64,
        ) {
            let traj = trajectory(values.clone());
            let mut rev = values;
            rev.reverse();
            let a = smooth_trajectory(&traj, sigma).unwrap();
            let b = smooth_trajectory(&trajectory(rev), sigma).unwrap();
            let n = a.len();
            for t in 0..n {
                for (x, y) in flatten(&a.latents[t]).iter().zip(flatten(&b.latents[n - 1 - t]).iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn smoothing_keeps_hull_membership(seed in 0u64..1000, frames in 1usize..15) {
            let space = toy_space(4, 99);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut traj = LatentTrajectory::new(ReenactmentConfig::default(), &space);
            for _ in 0..frames {
                traj.latents.push(finalize(&random_latent(&space, &mut rng, 0.3), &space).unwrap());
                traj.losses.push(1.0);
            }
            traj.validate(&space).unwrap();
            smooth_trajectory(&traj, 2.0).unwrap().validate(&space).unwrap();
        }
    }

    #[test]
    fn trajectory_round_trips_through_storage() {
        let space = toy_space(4, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut traj = LatentTrajectory::new(ReenactmentConfig { seed: 5, ..Default::default() }, &space);
        for t in 0..3 {
            traj.latents.push(finalize(&random_latent(&space, &mut rng, 0.2), &space).unwrap());
            traj.losses.push(t as f64 + 0.5);
        }
        let dir = tempfile::tempdir().unwrap();
        save_trajectory(dir.path(), "trajectory", &traj).unwrap();
        let back = load_trajectory(dir.path(), "trajectory").unwrap();
        assert_eq!(back.config, traj.config);
        assert_eq!(back.losses, traj.losses);
        assert_eq!(back.space_fingerprint, space.fingerprint());
        for (a, b) in back.latents.iter().zip(&traj.latents) {
            for (x, y) in flatten(a).iter().zip(flatten(b).iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        back.validate(&space).unwrap();
        assert!(matches!(load_trajectory(dir.path(), "missing"), Err(Error::MissingArtifact(_))));
    }
}
