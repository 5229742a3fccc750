//! Synthetic toy scenes: self-scans, personalized spaces, and smooth latent
//! paths with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::genbackend::toy::{ToyFaceParams, ToyParam};
use crate::genbackend::{Generator, ToyGenerator};
use crate::latentspace::{
    finalize, to_native, AnchorSet, PersonalizedLatent, PersonalizedSpace,
};
use crate::raster::Raster;

/// Random face parameters with each coordinate in the central `spread`
/// fraction of its range.
pub fn random_params(rng: &mut impl Rng, spread: f64) -> ToyFaceParams<f64> {
    let lo = 0.5 - 0.5 * spread;
    ToyFaceParams {
        values: ToyParam::ALL.map(|p| {
            let (a, b) = p.range();
            a + (b - a) * (lo + spread * rng.random::<f64>())
        }),
    }
}

/// Fraction of the expression spread that a self-scan covers in head pose.
pub const POSE_REACH: f64 = 0.3;

/// A self-scan: a random walk through expression that stays within
/// `spread / 2` of the middle of each parameter range, with head pose limited
/// to `POSE_REACH` of that and iris color fixed.
///
/// Eyes stay wide open except during `burst`, which closes both eyes on `len`
/// consecutive frames starting at `start`.
pub fn toy_scan(
    backend: &ToyGenerator,
    frames: usize,
    spread: f64,
    burst: Option<(usize, usize)>,
    seed: u64,
) -> Vec<Raster<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit: Vec<f64> = ToyParam::ALL.iter().map(|_| 0.5).collect();
    let step = spread / 6.0;
    (0..frames)
        .map(|t| {
            for (u, q) in unit.iter_mut().zip(ToyParam::ALL) {
                let reach = match q {
                    ToyParam::IrisRed | ToyParam::IrisGreen | ToyParam::IrisBlue => 0.0,
                    ToyParam::Cx | ToyParam::Cy | ToyParam::Scale | ToyParam::Yaw => POSE_REACH,
                    _ => 1.0,
                };
                let half = reach * spread / 2.0;
                *u = (*u + reach * rng.random_range(-step..step)).clamp(0.5 - half, 0.5 + half);
            }
            let mut p = ToyFaceParams {
                values: std::array::from_fn(|i| {
                    let (a, b) = ToyParam::ALL[i].range();
                    a + (b - a) * unit[i]
                }),
            };
            for q in [ToyParam::EyeOpenL, ToyParam::EyeOpenR] {
                let open = 0.85 + 0.15 * p.get(q);
                let closed = matches!(burst, Some((s, len)) if (s..s + len).contains(&t));
                p.set(q, if closed { 0.0 } else { open });
            }
            backend.render_params(&p)
        })
        .collect()
}

/// A space whose anchors invert `n` random faces of `backend`.
pub fn toy_space(backend: &ToyGenerator, n: usize, seed: u64) -> Result<PersonalizedSpace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = (0..n)
        .map(|_| backend.invert(&backend.render_params(&random_params(&mut rng, 0.7))))
        .collect::<Result<Vec<_>>>()?;
    PersonalizedSpace::with_defaults(AnchorSet::new(anchors)?, backend.layers())
}

/// A smooth path of in-hull latents covering `cycles` periods.
///
/// Base weights follow softmax-normalized sinusoids with random phases;
/// per-layer offsets are zero-sum sinusoids of amplitude `delta_amp`.
pub fn smooth_path(
    space: &PersonalizedSpace,
    frames: usize,
    cycles: f64,
    delta_amp: f64,
    seed: u64,
) -> Result<Vec<PersonalizedLatent<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = space.n();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let gain: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let layer_phase: Vec<Vec<f64>> = (0..space.layers())
        .map(|_| (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect())
        .collect();
    (0..frames)
        .map(|t| {
            let s = std::f64::consts::TAU * cycles * t as f64 / frames.max(1) as f64;
            let w: Vec<f64> = (0..n).map(|i| (1.5 * gain[i] * (s + phase[i]).sin()).exp()).collect();
            let total: f64 = w.iter().sum();
            let alpha: Vec<f64> = w.iter().map(|v| v / total).collect();
            let deltas = layer_phase
                .iter()
                .map(|ph| {
                    let raw: Vec<f64> = ph.iter().map(|p| delta_amp * (s + p).sin()).collect();
                    let mean = raw.iter().sum::<f64>() / n as f64;
                    raw.iter().map(|v| v - mean).collect()
                })
                .collect();
            finalize(&PersonalizedLatent::effective(alpha, deltas), space)
        })
        .collect()
}

/// Renders each latent of `path`.
pub fn render_path<G: Generator>(
    backend: &G,
    space: &PersonalizedSpace,
    path: &[PersonalizedLatent<f64>],
) -> Result<Vec<Raster<f64>>> {
    path.iter()
        .map(|pl| backend.generate(&to_native(pl, space)?))
        .collect()
}
