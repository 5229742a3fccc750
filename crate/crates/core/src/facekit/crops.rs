use serde::{Deserialize, Serialize};

use super::{GroupedKeypoints, KeypointGroup, Point3};
use crate::error::{Error, Result};
use crate::raster::{Raster, Rect};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Mouth,
    LeftEye,
    RightEye,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Mouth => "mouth",
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
        }
    }
}

/// Which lip contour bounds the mouth crop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MouthSource {
    #[default]
    Inner,
    Outer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionCrop<T = f64> {
    pub region: Region,
    pub rect: Rect,
    pub pixels: Raster<T>,
}

/// Keypoints that bound `region`: the mouth contour or the iris points.
pub fn region_points<T: Scalar>(
    gk: &GroupedKeypoints<T>,
    region: Region,
    mouth: MouthSource,
) -> Result<&[Point3<T>]> {
    match (region, mouth) {
        (Region::Mouth, MouthSource::Inner) => Ok(gk.group(KeypointGroup::Mouth)),
        (Region::Mouth, MouthSource::Outer) => gk.mouth_outer().ok_or_else(|| {
            Error::InvalidParameter("outer mouth crop requested but table has no outer lips".into())
        }),
        (Region::LeftEye, _) => Ok(gk.group(KeypointGroup::LeftIris)),
        (Region::RightEye, _) => Ok(gk.group(KeypointGroup::RightIris)),
    }
}

/// Integer bounding box of `points`, clamped to a `width × height` image.
pub fn region_rect<T: Scalar>(
    points: &[Point3<T>],
    width: usize,
    height: usize,
    region: Region,
) -> Result<Rect> {
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        let (x, y) = (p[0].re(), p[1].re());
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !(x_lo.is_finite() && x_hi.is_finite() && y_lo.is_finite() && y_hi.is_finite()) {
        return Err(Error::DegenerateRegion(region.name().into()));
    }
    let clamp = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
    let rect = Rect::new(
        clamp(x_lo.floor(), width),
        clamp(y_lo.floor(), height),
        clamp(x_hi.ceil(), width),
        clamp(y_hi.ceil(), height),
    );
    if rect.is_empty() {
        return Err(Error::DegenerateRegion(region.name().into()));
    }
    Ok(rect)
}

pub fn crop_region<T: Scalar, K: Scalar>(
    image: &Raster<T>,
    gk: &GroupedKeypoints<K>,
    region: Region,
) -> Result<RegionCrop<T>> {
    crop_region_with(image, gk, region, MouthSource::Inner)
}

pub fn crop_region_with<T: Scalar, K: Scalar>(
    image: &Raster<T>,
    gk: &GroupedKeypoints<K>,
    region: Region,
    mouth: MouthSource,
) -> Result<RegionCrop<T>> {
    let points = region_points(gk, region, mouth)?;
    let rect = region_rect(points, image.width(), image.height(), region)?;
    Ok(RegionCrop {
        region,
        rect,
        pixels: image.crop(rect)?,
    })
}

fn shrink_axis(lo: usize, hi: usize, target: usize) -> (usize, usize) {
    let surplus = (hi - lo) - target;
    // Odd surplus: the extra pixel goes from the high side.
    let lo = lo + surplus / 2;
    (lo, lo + target)
}

/// Center-crops the larger rectangle to the smaller extent, per axis.
pub fn harmonize_rects(a: Rect, b: Rect) -> (Rect, Rect) {
    let w = a.width().min(b.width());
    let h = a.height().min(b.height());
    let fit = |r: Rect| {
        let (x0, x1) = shrink_axis(r.x0, r.x1, w);
        let (y0, y1) = shrink_axis(r.y0, r.y1, h);
        Rect::new(x0, y0, x1, y1)
    };
    (fit(a), fit(b))
}

pub fn harmonize_crops<T: Scalar>(
    a: &RegionCrop<T>,
    b: &RegionCrop<T>,
) -> Result<(Raster<T>, Raster<T>)> {
    if a.region != b.region {
        return Err(Error::RegionMismatch(
            a.region.name().into(),
            b.region.name().into(),
        ));
    }
    let (ra, rb) = harmonize_rects(a.rect, b.rect);
    let local = |outer: Rect, inner: Rect| {
        Rect::new(
            inner.x0 - outer.x0,
            inner.y0 - outer.y0,
            inner.x1 - outer.x0,
            inner.y1 - outer.y0,
        )
    };
    Ok((
        a.pixels.crop(local(a.rect, ra))?,
        b.pixels.crop(local(b.rect, rb))?,
    ))
}

/// Euclidean norm of the pixel difference.
pub fn region_pixel_loss<T: Scalar>(pa: &Raster<T>, pb: &Raster<T>) -> Result<T> {
    if !pa.same_shape(pb) {
        return Err(Error::ShapeMismatch(format!(
            "patches {:?} vs {:?}",
            pa.shape(),
            pb.shape()
        )));
    }
    let sq: T = pa
        .data()
        .iter()
        .zip(pb.data())
        .map(|(a, b)| (*a - *b) * (*a - *b))
        .sum();
    Ok(if sq.re() == 0.0 { T::zero() } else { sq.sqrt() })
}
