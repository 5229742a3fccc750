//! End-to-end orchestration: smoothed alignment, training-set construction,
//! editing and stylization of trajectories, video containers, and the run
//! stages behind the command-line tool.

mod config;
mod run;
mod video;

pub use config::*;
pub use run::*;
pub use video::*;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facekit::{select_subset, KeypointDetector, KeypointGroup, KeypointIndexTable};
use crate::genbackend::toy::{toy_keypoints, AffineMap, ToyFaceParams, ToyIdentity, ToyParam};
use crate::genbackend::Generator;
use crate::latentspace::{to_native, NativeLatentStack, PersonalizedSpace};
use crate::raster::{Raster, Similarity};
use crate::reenact::{gaussian_kernel, smooth_series, LatentTrajectory};
use crate::scanselect::{
    decimation_stride, greedy_diverse_subset, pairwise_distances, DistanceBackend, DistanceMatrix,
    SubsetSelection,
};

/// Left eye, right eye and mouth centers in pixels.
pub type AlignmentAnchors = [[f64; 2]; 3];

/// Canonical anchor positions of the toy face at its parameter midpoint, in
/// units of the crop side.
pub fn toy_canonical_anchors() -> AlignmentAnchors {
    let gk = toy_keypoints(&ToyIdentity::default(), &ToyFaceParams::<f64>::midpoint(), 1, 1);
    anchors_from_groups(&gk)
}

fn anchors_from_groups(gk: &crate::facekit::GroupedKeypoints<f64>) -> AlignmentAnchors {
    let centroid = |g: KeypointGroup| {
        let pts = gk.group(g);
        let n = pts.len() as f64;
        [
            pts.iter().map(|p| p[0]).sum::<f64>() / n,
            pts.iter().map(|p| p[1]).sum::<f64>() / n,
        ]
    };
    [
        centroid(KeypointGroup::LeftEyelid),
        centroid(KeypointGroup::RightEyelid),
        centroid(KeypointGroup::Mouth),
    ]
}

/// Least-squares similarity taking `canonical` onto `source`.
///
/// The coefficients are linear in `source`, so smoothing the anchors and
/// smoothing the fitted coefficients agree.
pub fn fit_similarity(canonical: &AlignmentAnchors, source: &AlignmentAnchors) -> Result<Similarity> {
    let mean = |pts: &AlignmentAnchors, k: usize| pts.iter().map(|p| p[k]).sum::<f64>() / 3.0;
    let (cx, cy) = (mean(canonical, 0), mean(canonical, 1));
    let (sx, sy) = (mean(source, 0), mean(source, 1));
    let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
    for (c, s) in canonical.iter().zip(source) {
        let (u, v) = (c[0] - cx, c[1] - cy);
        let (x, y) = (s[0] - sx, s[1] - sy);
        num_a += u * x + v * y;
        num_b += u * y - v * x;
        den += u * u + v * v;
    }
    if den <= 0.0 {
        return Err(Error::InvalidParameter("canonical anchors are coincident".into()));
    }
    let (a, b) = (num_a / den, num_b / den);
    Ok(Similarity {
        a,
        b,
        tx: sx - a * cx + b * cy,
        ty: sy - b * cx - a * cy,
    })
}

/// Per-frame crop transforms of an aligned video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub sigma: f64,
    /// Canonical crop pixels to source pixels, one per frame; the inverse
    /// maps each source frame onto its crop.
    pub transforms: Vec<Similarity>,
    /// Frames whose anchors were interpolated across a detection gap.
    pub interpolated: Vec<usize>,
}

impl AlignmentParams {
    pub fn to_canonical(&self, frame: usize) -> Result<Similarity> {
        self.transforms[frame].inverse()
    }

    /// Largest rotation change between consecutive frames, in radians.
    pub fn max_rotation_step(&self) -> f64 {
        self.transforms
            .windows(2)
            .map(|w| {
                let d = w[1].rotation() - w[0].rotation();
                d.sin().atan2(d.cos()).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Summed absolute frame-to-frame change of the four transform coefficients.
    pub fn total_variation(&self) -> f64 {
        self.transforms
            .windows(2)
            .map(|w| {
                w[0].as_array()
                    .iter()
                    .zip(w[1].as_array())
                    .map(|(a, b)| (b - a).abs())
                    .sum::<f64>()
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct AlignedVideo {
    pub frames: Vec<Raster<f64>>,
    pub params: AlignmentParams,
}

/// Fills runs of missing anchors by linear interpolation, holding the
/// nearest detection at either end of the video.
fn fill_gaps(mut found: Vec<Option<AlignmentAnchors>>, max_gap: usize) -> Result<(Vec<AlignmentAnchors>, Vec<usize>)> {
    let n = found.len();
    let mut interpolated = Vec::new();
    let mut t = 0;
    while t < n {
        if found[t].is_some() {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && found[t].is_none() {
            t += 1;
        }
        if t - start > max_gap || (start == 0 && t == n) {
            return Err(Error::NoFaceDetected { frame: Some(start) });
        }
        let before = start.checked_sub(1).and_then(|i| found[i]);
        let after = found.get(t).copied().flatten();
        for (k, slot) in found[start..t].iter_mut().enumerate() {
            let fill = match (before, after) {
                (Some(a), Some(b)) => {
                    let w = (k + 1) as f64 / (t - start + 1) as f64;
                    std::array::from_fn(|i| std::array::from_fn(|j| a[i][j] + w * (b[i][j] - a[i][j])))
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("gap spanning the whole video is rejected above"),
            };
            *slot = Some(fill);
            interpolated.push(start + k);
        }
    }
    Ok((found.into_iter().flatten().collect(), interpolated))
}

/// Maps every frame onto a `resolution × resolution` canonical crop.
///
/// Eye and mouth centers are detected per frame, gaps of up to
/// `cfg.max_gap` frames are interpolated, the anchor series is smoothed with
/// a Gaussian of `cfg.sigma` frames, and a similarity is fitted per frame.
pub fn align_video(
    frames: &[Raster<f64>],
    detector: &dyn KeypointDetector,
    table: &KeypointIndexTable,
    cfg: &AlignConfig,
    resolution: usize,
) -> Result<AlignedVideo> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to align".into()));
    }
    let detect = |f: &Raster<f64>| -> Result<Option<AlignmentAnchors>> {
        match detector.detect(f) {
            Ok(kf) => Ok(Some(anchors_from_groups(&select_subset(&kf, table)?))),
            Err(Error::NoFaceDetected { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let found: Vec<Option<AlignmentAnchors>> = if detector.shareable() {
        frames.par_iter().map(detect).collect::<Result<_>>()?
    } else {
        frames.iter().map(detect).collect::<Result<_>>()?
    };
    let (anchors, interpolated) = fill_gaps(found, cfg.max_gap)?;

    let series: Vec<Vec<f64>> = anchors.iter().map(|a| a.iter().flatten().copied().collect()).collect();
    let smoothed = smooth_series(&series, &gaussian_kernel(cfg.sigma));
    let side = resolution as f64;
    let canonical: AlignmentAnchors = cfg.anchors.map(|p| [p[0] * side, p[1] * side]);
    let transforms = smoothed
        .iter()
        .map(|s| fit_similarity(&canonical, &[[s[0], s[1]], [s[2], s[3]], [s[4], s[5]]]))
        .collect::<Result<Vec<_>>>()?;
    let params = AlignmentParams {
        sigma: cfg.sigma,
        transforms,
        interpolated,
    };
    let jump = params.max_rotation_step();
    if jump > cfg.max_rotation_step {
        return Err(Error::InvalidParameter(format!(
            "aligned rotation jumps by {jump:.3} rad between frames, bound is {}",
            cfg.max_rotation_step
        )));
    }
    let aligned = frames
        .par_iter()
        .zip(&params.transforms)
        .map(|(f, t)| f.warp(t, resolution, resolution))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignedVideo {
        frames: aligned,
        params,
    })
}

/// Aligned training frames chosen from a self-scan.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub frames: Vec<Raster<f64>>,
    /// Indices of `frames` in the original scan.
    pub indices: Vec<usize>,
    /// Selection over the decimated candidates.
    pub selection: SubsetSelection,
    pub stride: usize,
    pub distances: DistanceMatrix<f64>,
    pub alignment: AlignmentParams,
}

/// Aligns `scan`, decimates long scans, and picks `cfg.scan.n` diverse frames.
pub fn select_training_set(
    scan: &[Raster<f64>],
    detector: &dyn KeypointDetector,
    table: &KeypointIndexTable,
    metric: &dyn DistanceBackend,
    cfg: &RunConfig,
) -> Result<TrainingSet> {
    let n = cfg.scan.n;
    if scan.len() < n {
        return Err(Error::TooFewFrames { have: scan.len(), need: n });
    }
    let aligned = align_video(scan, detector, table, &cfg.align, cfg.canonical_resolution)?;
    let stride = decimation_stride(scan.len(), cfg.scan.decimate_above);
    let candidates: Vec<Raster<f64>> = aligned.frames.iter().step_by(stride).cloned().collect();
    if candidates.len() < n {
        return Err(Error::TooFewFrames { have: candidates.len(), need: n });
    }
    let distances = pairwise_distances(&candidates, metric)?;
    let selection = greedy_diverse_subset(&distances, n)?;
    let indices: Vec<usize> = selection.indices.iter().map(|i| i * stride).collect();
    let frames = indices.iter().map(|&i| aligned.frames[i].clone()).collect();
    Ok(TrainingSet {
        frames,
        indices,
        selection,
        stride,
        distances,
        alignment: aligned.params,
    })
}

/// A native-space vector for one generator layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDirection {
    pub layer: usize,
    pub vector: Vec<f64>,
}

/// A semantic edit in native latent space, applied on selected layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditDirection {
    pub name: String,
    pub layers: Vec<LayerDirection>,
    /// Inclusive range of accepted step sizes.
    pub step_range: (f64, f64),
}

impl EditDirection {
    /// Unit direction that opens the toy mouth, on the mouth layer only.
    pub fn toy_mouth(map: &AffineMap) -> Self {
        let row = map.row(ToyParam::MouthOpen);
        let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        Self {
            name: "toy_mouth_open".into(),
            layers: vec![LayerDirection {
                layer: ToyParam::MouthOpen.layer(),
                vector: row.iter().map(|w| w / norm).collect(),
            }],
            step_range: (-3.0, 3.0),
        }
    }

    pub fn validate(&self, layers: usize, dim: usize) -> Result<()> {
        for d in &self.layers {
            if d.layer >= layers || d.vector.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "direction `{}` has a {}-vector on layer {}, backend has {layers} layers of dimension {dim}",
                    self.name,
                    d.vector.len(),
                    d.layer
                )));
            }
        }
        let (lo, hi) = self.step_range;
        if !(lo <= hi) {
            return Err(Error::InvalidParameter(format!("empty step range {lo}..={hi}")));
        }
        Ok(())
    }
}

/// Native codes of `traj` shifted by `step · direction`.
pub fn edit_trajectory(
    traj: &LatentTrajectory,
    space: &PersonalizedSpace,
    direction: &EditDirection,
    step: f64,
) -> Result<Vec<NativeLatentStack<f64>>> {
    direction.validate(space.layers(), space.dim())?;
    let (lo, hi) = direction.step_range;
    if !(lo..=hi).contains(&step) {
        return Err(Error::InvalidParameter(format!(
            "step {step} outside {lo}..={hi} for direction `{}`",
            direction.name
        )));
    }
    traj.latents
        .iter()
        .map(|pl| {
            let mut codes = to_native(pl, space)?;
            for d in &direction.layers {
                for (c, v) in codes.layer_mut(d.layer).iter_mut().zip(&d.vector) {
                    *c += step * v;
                }
            }
            Ok(codes)
        })
        .collect()
}

/// Renders `traj` through `alt`, which must share the space's layer count and
/// latent width.
pub fn stylize_trajectory<G: Generator>(
    traj: &LatentTrajectory,
    space: &PersonalizedSpace,
    alt: &G,
) -> Result<Vec<Raster<f64>>> {
    if alt.layers() != space.layers() || alt.latent_dim() != space.dim() {
        return Err(Error::BackendShapeMismatch(format!(
            "`{}` has {} layers of dimension {}, the space needs {} of {}",
            alt.id(),
            alt.layers(),
            alt.latent_dim(),
            space.layers(),
            space.dim()
        )));
    }
    traj.latents
        .par_iter()
        .map(|pl| alt.generate(&to_native(pl, space)?))
        .collect()
}
