//! Facial keypoint handling: subset selection, per-part normalization, the
//! keypoint loss, and the mouth/eye pixel-region losses.

mod crops;
mod table;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crops::{
    crop_region, crop_region_with, harmonize_crops, harmonize_rects, region_pixel_loss,
    region_points, region_rect, MouthSource, Region, RegionCrop,
};
pub use table::{
    KeypointIndexTable, DEFAULT_HEAD_FRAME, DEFAULT_LEFT_EYELID, DEFAULT_LEFT_IRIS,
    DEFAULT_MOUTH_INNER, DEFAULT_MOUTH_OUTER, DEFAULT_RIGHT_EYELID, DEFAULT_RIGHT_IRIS,
};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::store::{self, Manifest};

/// Number of points in a full face-mesh frame.
pub const MESH_POINTS: usize = 468;

pub type Point3<T> = [T; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointGroup {
    LeftEyelid,
    RightEyelid,
    LeftIris,
    RightIris,
    Mouth,
    HeadFrame,
}

impl KeypointGroup {
    pub const ALL: [KeypointGroup; 6] = [
        KeypointGroup::LeftEyelid,
        KeypointGroup::RightEyelid,
        KeypointGroup::LeftIris,
        KeypointGroup::RightIris,
        KeypointGroup::Mouth,
        KeypointGroup::HeadFrame,
    ];

    /// Groups whose coordinates are centered per part.
    pub const RELATIVE: [KeypointGroup; 5] = [
        KeypointGroup::LeftEyelid,
        KeypointGroup::RightEyelid,
        KeypointGroup::LeftIris,
        KeypointGroup::RightIris,
        KeypointGroup::Mouth,
    ];

    pub fn expected_len(self) -> usize {
        match self {
            KeypointGroup::LeftEyelid | KeypointGroup::RightEyelid => 16,
            KeypointGroup::LeftIris | KeypointGroup::RightIris => 5,
            KeypointGroup::Mouth => 20,
            KeypointGroup::HeadFrame => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KeypointGroup::LeftEyelid => "left_eyelid",
            KeypointGroup::RightEyelid => "right_eyelid",
            KeypointGroup::LeftIris => "left_iris",
            KeypointGroup::RightIris => "right_iris",
            KeypointGroup::Mouth => "mouth",
            KeypointGroup::HeadFrame => "head_frame",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Raw 3D keypoints for one image, in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFrame<T = f64> {
    points: Vec<Point3<T>>,
    image_size: (usize, usize),
    off_image: Vec<bool>,
}

impl<T: Scalar> KeypointFrame<T> {
    /// Builds a frame, flagging points whose (x, y) fall outside the image.
    pub fn new(points: Vec<Point3<T>>, image_size: (usize, usize)) -> Result<Self> {
        if points.len() != MESH_POINTS {
            return Err(Error::ShapeMismatch(format!(
                "keypoint frame needs {MESH_POINTS} points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidParameter("non-finite keypoint".into()));
        }
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let off_image = points
            .iter()
            .map(|p| {
                let (x, y) = (p[0].re(), p[1].re());
                !(0.0..w).contains(&x) || !(0.0..h).contains(&y)
            })
            .collect();
        Ok(Self {
            points,
            image_size,
            off_image,
        })
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn is_off_image(&self, index: usize) -> bool {
        self.off_image[index]
    }

    pub fn off_image_count(&self) -> usize {
        self.off_image.iter().filter(|f| **f).count()
    }
}

/// The 66-point subset grouped by facial part, in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedKeypoints<T = f64> {
    groups: [Vec<Point3<T>>; 6],
    mouth_outer: Option<Vec<Point3<T>>>,
}

impl<T: Scalar> GroupedKeypoints<T> {
    /// `groups` follows the order of [`KeypointGroup::ALL`].
    pub fn new(groups: [Vec<Point3<T>>; 6], mouth_outer: Option<Vec<Point3<T>>>) -> Result<Self> {
        for g in KeypointGroup::ALL {
            if groups[g.slot()].len() != g.expected_len() {
                return Err(Error::ShapeMismatch(format!(
                    "group {} has {} points, expected {}",
                    g.name(),
                    groups[g.slot()].len(),
                    g.expected_len()
                )));
            }
        }
        if let Some(outer) = &mouth_outer {
            if outer.len() != 20 {
                return Err(Error::ShapeMismatch("outer mouth needs 20 points".into()));
            }
        }
        Ok(Self {
            groups,
            mouth_outer,
        })
    }

    pub fn group(&self, group: KeypointGroup) -> &[Point3<T>] {
        &self.groups[group.slot()]
    }

    pub fn mouth_outer(&self) -> Option<&[Point3<T>]> {
        self.mouth_outer.as_deref()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies `f` to every point, including the outer mouth contour.
    pub fn map_points(&self, f: impl Fn(&Point3<T>) -> Point3<T>) -> Self {
        Self {
            groups: self.groups.clone().map(|g| g.iter().map(&f).collect()),
            mouth_outer: self
                .mouth_outer
                .as_ref()
                .map(|g| g.iter().map(&f).collect()),
        }
    }

    pub fn to_f64(&self) -> GroupedKeypoints<f64> {
        let lower = |p: &Point3<T>| [p[0].re(), p[1].re(), p[2].re()];
        GroupedKeypoints {
            groups: self.groups.clone().map(|g| g.iter().map(lower).collect()),
            mouth_outer: self.mouth_outer.as_ref().map(|g| g.iter().map(lower).collect()),
        }
    }
}

/// How the relative groups of a descriptor were produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorMode {
    /// Each facial part centered to zero mean.
    #[default]
    Normalized,
    /// Raw image coordinates for every point.
    Absolute,
}

/// Identity-robust pose/expression descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedKeypointDescriptor<T = f64> {
    relative: [Vec<Point3<T>>; 5],
    head_frame: Vec<Point3<T>>,
    mode: DescriptorMode,
}

impl<T: Scalar> NormalizedKeypointDescriptor<T> {
    pub fn relative(&self, group: KeypointGroup) -> Option<&[Point3<T>]> {
        KeypointGroup::RELATIVE
            .iter()
            .position(|g| *g == group)
            .map(|i| self.relative[i].as_slice())
    }

    pub fn head_frame(&self) -> &[Point3<T>] {
        &self.head_frame
    }

    pub fn mode(&self) -> DescriptorMode {
        self.mode
    }

    /// All points in a fixed order: relative groups, then head frame.
    pub fn points(&self) -> impl Iterator<Item = &Point3<T>> {
        self.relative.iter().flatten().chain(self.head_frame.iter())
    }

    fn sizes(&self) -> [usize; 6] {
        [
            self.relative[0].len(),
            self.relative[1].len(),
            self.relative[2].len(),
            self.relative[3].len(),
            self.relative[4].len(),
            self.head_frame.len(),
        ]
    }
}

impl NormalizedKeypointDescriptor<f64> {
    pub fn cast<T: Scalar>(&self) -> NormalizedKeypointDescriptor<T> {
        let lift = |v: &Vec<Point3<f64>>| v.iter().map(|p| p.map(T::cst)).collect();
        NormalizedKeypointDescriptor {
            relative: std::array::from_fn(|i| lift(&self.relative[i])),
            head_frame: lift(&self.head_frame),
            mode: self.mode,
        }
    }
}

/// Picks the subset points named by `table`, in table order.
pub fn select_subset<T: Scalar>(
    kf: &KeypointFrame<T>,
    table: &KeypointIndexTable,
) -> Result<GroupedKeypoints<T>> {
    let pick = |indices: &[usize]| -> Result<Vec<Point3<T>>> {
        indices
            .iter()
            .map(|&i| {
                kf.points.get(i).copied().ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: kf.points.len(),
                })
            })
            .collect()
    };
    let groups = [
        pick(&table.left_eyelid)?,
        pick(&table.right_eyelid)?,
        pick(&table.left_iris)?,
        pick(&table.right_iris)?,
        pick(&table.mouth)?,
        pick(&table.head_frame)?,
    ];
    let outer = table.mouth_outer.as_deref().map(pick).transpose()?;
    GroupedKeypoints::new(groups, outer)
}

fn centered<T: Scalar>(points: &[Point3<T>]) -> Vec<Point3<T>> {
    let n = T::cst(points.len() as f64);
    let mut mean = [T::zero(); 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    points
        .iter()
        .map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]])
        .collect()
}

/// Centers each facial part to zero mean; head-frame points stay absolute.
pub fn normalize_groups<T: Scalar>(gk: &GroupedKeypoints<T>) -> NormalizedKeypointDescriptor<T> {
    NormalizedKeypointDescriptor {
        relative: KeypointGroup::RELATIVE.map(|g| centered(gk.group(g))),
        head_frame: gk.group(KeypointGroup::HeadFrame).to_vec(),
        mode: DescriptorMode::Normalized,
    }
}

/// Descriptor with every point in absolute image coordinates.
pub fn absolute_descriptor<T: Scalar>(gk: &GroupedKeypoints<T>) -> NormalizedKeypointDescriptor<T> {
    NormalizedKeypointDescriptor {
        relative: KeypointGroup::RELATIVE.map(|g| gk.group(g).to_vec()),
        head_frame: gk.group(KeypointGroup::HeadFrame).to_vec(),
        mode: DescriptorMode::Absolute,
    }
}

pub fn describe<T: Scalar>(
    gk: &GroupedKeypoints<T>,
    mode: DescriptorMode,
) -> NormalizedKeypointDescriptor<T> {
    match mode {
        DescriptorMode::Normalized => normalize_groups(gk),
        DescriptorMode::Absolute => absolute_descriptor(gk),
    }
}

/// Sum over all points of the Euclidean distance between corresponding points.
pub fn keypoint_loss<T: Scalar>(
    d: &NormalizedKeypointDescriptor<T>,
    g: &NormalizedKeypointDescriptor<T>,
) -> Result<T> {
    if d.sizes() != g.sizes() || d.mode != g.mode {
        return Err(Error::ShapeMismatch(format!(
            "descriptor groups {:?}/{:?} vs {:?}/{:?}",
            d.sizes(),
            d.mode,
            g.sizes(),
            g.mode
        )));
    }
    Ok(d.points()
        .zip(g.points())
        .map(|(a, b)| point_distance(a, b))
        .sum())
}

#[inline]
pub(crate) fn point_distance<T: Scalar>(a: &Point3<T>, b: &Point3<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    let sq = dx * dx + dy * dy + dz * dz;
    if sq.re() == 0.0 {
        // The norm has no derivative at zero; report the zero subgradient.
        T::zero()
    } else {
        sq.sqrt()
    }
}

/// A face-mesh keypoint estimator.
pub trait KeypointDetector: Send + Sync {
    fn id(&self) -> &str;

    fn detect(&self, image: &Raster<f64>) -> Result<KeypointFrame<f64>>;

    /// Whether one handle may serve concurrent callers.
    fn shareable(&self) -> bool {
        true
    }
}

/// Runs `backend` on an RGB image.
pub fn extract_keypoints(
    image: &Raster<f64>,
    backend: &dyn KeypointDetector,
) -> Result<KeypointFrame<f64>> {
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "keypoint extraction expects 3 channels, got {}",
            image.channels()
        )));
    }
    backend.detect(image)
}

/// Slot for an out-of-process detector (e.g. a face-mesh model server).
#[derive(Clone, Debug)]
pub struct ExternalDetector {
    pub name: String,
}

impl KeypointDetector for ExternalDetector {
    fn id(&self) -> &str {
        &self.name
    }

    fn detect(&self, _image: &Raster<f64>) -> Result<KeypointFrame<f64>> {
        Err(Error::BackendUnavailable(self.name.clone()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorMeta {
    mode: DescriptorMode,
    groups: Vec<String>,
}

/// Persists a descriptor as `descriptor.json` plus one float32 blob.
pub fn save_descriptor(dir: &Path, d: &NormalizedKeypointDescriptor<f64>) -> Result<()> {
    let n = d.points().count();
    let blob = store::write_blob(dir, "descriptor", d.points().flatten().copied(), vec![n, 3])?;
    let mut manifest = Manifest::new(
        "keypoint_descriptor",
        DescriptorMeta {
            mode: d.mode,
            groups: KeypointGroup::RELATIVE
                .iter()
                .chain([KeypointGroup::HeadFrame].iter())
                .map(|g| g.name().to_string())
                .collect(),
        },
    );
    manifest.blobs.insert("points".into(), blob);
    store::write_json(&dir.join("descriptor.json"), &manifest)
}

pub fn load_descriptor(dir: &Path) -> Result<NormalizedKeypointDescriptor<f64>> {
    let path = dir.join("descriptor.json");
    let manifest: Manifest<DescriptorMeta> = store::read_manifest(&path, "keypoint_descriptor")?;
    let values = store::read_blob_f64(dir, manifest.blob("points", &path)?)?;
    if values.len() != 66 * 3 {
        return Err(Error::format(&path, "descriptor must hold 66 points"));
    }
    let mut points = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]);
    let relative = KeypointGroup::RELATIVE.map(|g| points.by_ref().take(g.expected_len()).collect());
    Ok(NormalizedKeypointDescriptor {
        relative,
        head_frame: points.collect(),
        mode: manifest.meta.mode,
    })
}
