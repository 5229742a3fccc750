//! Row-major interleaved image buffers and integer pixel rectangles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::toy::{ToyFace, ToyView};
use crate::scalar::Scalar;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }
}

/// Planar similarity `(x, y) ↦ (a·x − b·y + tx, b·x + a·y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for Similarity {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Similarity {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x - self.b * y + self.tx,
            self.b * x + self.a * y + self.ty,
        )
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Counter-clockwise angle in radians for y pointing down the image.
    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &Similarity) -> Similarity {
        let (tx, ty) = self.apply(inner.tx, inner.ty);
        Similarity {
            a: self.a * inner.a - self.b * inner.b,
            b: self.b * inner.a + self.a * inner.b,
            tx,
            ty,
        }
    }

    pub fn inverse(&self) -> Result<Similarity> {
        let det = self.a * self.a + self.b * self.b;
        if !(det > 0.0 && det.is_finite()) {
            return Err(Error::InvalidParameter(format!("singular similarity {self:?}")));
        }
        let (a, b) = (self.a / det, -self.b / det);
        Ok(Similarity {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.a, self.b, self.tx, self.ty]
    }
}

/// An image with `channels` interleaved samples per pixel, nominally in `[0, 1]`.
///
/// Frames produced by the toy generator carry the [`ToyFace`] that rendered
/// them; toy analysis backends read it back instead of estimating it.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T = f64> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
    pub annotation: Option<ToyFace>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "raster dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height}x{channels} raster needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            annotation: None,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
            annotation: None,
        }
    }

    pub fn with_annotation(mut self, annotation: Option<ToyFace>) -> Self {
        self.annotation = annotation;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    /// Copies the pixels inside `rect`; the annotation is not carried over.
    pub fn crop(&self, rect: Rect) -> Result<Raster<T>> {
        if rect.is_empty() || rect.x1 > self.width || rect.y1 > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop {rect:?} outside {}x{} raster",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(rect.width() * rect.height() * self.channels);
        for y in rect.y0..rect.y1 {
            let start = (y * self.width + rect.x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + rect.width() * self.channels]);
        }
        Raster::new(rect.width(), rect.height(), self.channels, data)
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`), clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> T {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = T::cst(fx - x0 as f64);
        let ty = T::cst(fy - y0 as f64);
        let one = T::one();
        let top = self.get(x0, y0, c) * (one - tx) + self.get(x1, y0, c) * tx;
        let bottom = self.get(x0, y1, c) * (one - tx) + self.get(x1, y1, c) * tx;
        top * (one - ty) + bottom * ty
    }

    pub fn mean(&self) -> T {
        let n = T::cst(self.data.len() as f64);
        self.data.iter().copied().sum::<T>() / n
    }

    /// Primal values as `f64`, dropping any derivative parts.
    pub fn to_f64(&self) -> Raster<f64> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| v.re()).collect(),
            annotation: self.annotation.clone(),
        }
    }

    pub fn same_shape<U: Scalar>(&self, other: &Raster<U>) -> bool {
        self.shape() == other.shape()
    }
}

impl Raster<f64> {
    /// Lifts the pixels into `T` as constants.
    pub fn cast<T: Scalar>(&self) -> Raster<T> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| T::cst(*v)).collect(),
            annotation: self.annotation.clone(),
        }
    }
}

impl Raster<f64> {
    /// Resamples into a `width × height` frame whose pixel at `p` shows the
    /// source at `to_source(p)`.
    ///
    /// A toy annotation follows the pixels: its view becomes the map from
    /// render coordinates to the new frame.
    pub fn warp(&self, to_source: &Similarity, width: usize, height: usize) -> Result<Raster<f64>> {
        let from_source = to_source.inverse()?;
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = to_source.apply(x as f64 + 0.5, y as f64 + 0.5);
                for c in 0..self.channels {
                    data.push(self.sample_bilinear(sx, sy, c));
                }
            }
        }
        let annotation = self.annotation.clone().map(|mut face| {
            let view = face.view.unwrap_or(ToyView {
                render_size: (self.width, self.height),
                to_frame: Similarity::IDENTITY,
            });
            face.view = Some(ToyView {
                to_frame: from_source.compose(&view.to_frame),
                ..view
            });
            face
        });
        Ok(Raster::new(width, height, self.channels, data)?.with_annotation(annotation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Raster<f64> {
        let data = (0..w * h).map(|i| i as f64).collect();
        Raster::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn crop_copies_rows() {
        let r = ramp(4, 3);
        let c = r.crop(Rect::new(1, 1, 3, 3)).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn crop_outside_fails() {
        assert!(ramp(4, 3).crop(Rect::new(2, 0, 5, 1)).is_err());
        assert!(ramp(4, 3).crop(Rect::new(2, 0, 2, 1)).is_err());
    }

    #[test]
    fn bilinear_hits_pixel_centers() {
        let r = ramp(4, 3);
        assert_eq!(r.sample_bilinear(2.5, 1.5, 0), 6.0);
        assert!((r.sample_bilinear(2.0, 1.5, 0) - 5.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_inverse_and_compose() {
        let s = Similarity { a: 0.9, b: 0.2, tx: 3.0, ty: -1.5 };
        let id = s.compose(&s.inverse().unwrap());
        for (u, v) in id.as_array().iter().zip(Similarity::IDENTITY.as_array()) {
            assert!((u - v).abs() < 1e-12);
        }
        let (x, y) = s.apply(2.0, 5.0);
        let (bx, by) = s.inverse().unwrap().apply(x, y);
        assert!((bx - 2.0).abs() < 1e-12 && (by - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identity_warp_is_exact() {
        let r = ramp(5, 4);
        assert_eq!(r.warp(&Similarity::IDENTITY, 5, 4).unwrap(), r);
    }

    #[test]
    fn translation_warp_shifts_pixels() {
        let r = ramp(5, 4);
        let shift = Similarity { tx: 1.0, ..Similarity::IDENTITY };
        let w = r.warp(&shift, 4, 4).unwrap();
        assert_eq!(w.get(0, 2, 0), r.get(1, 2, 0));
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(Raster::<f64>::new(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
