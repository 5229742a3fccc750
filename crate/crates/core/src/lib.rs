//! Personalized facial reenactment by constrained latent optimization.
//!
//! A short self-scan is reduced to a diverse training set ([`scanselect`]),
//! inverted into anchors that span a personalized latent subspace
//! ([`latentspace`]), and driving videos are reenacted by optimizing a
//! keypoint and region loss inside that subspace ([`facekit`], [`reenact`]).
//! [`genbackend`] ships an analytic toy face generator with closed-form
//! keypoints so every stage can be checked against a known answer.
//!
//! Numeric code is generic over [`Scalar`]: `f64`, `f32`, and the
//! forward-mode [`Dual`] used for derivatives. The aliases below fix the
//! common choices.

pub mod error;
pub mod evalkit;
pub mod facekit;
pub mod genbackend;
pub mod latentspace;
pub mod pipeline;
pub mod raster;
pub mod reenact;
pub mod scalar;
pub mod scanselect;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{Raster, Rect};
pub use scalar::{Dual, Scalar};

pub type Image = raster::Raster<f64>;
pub type Image32 = raster::Raster<f32>;
pub type Latent = latentspace::PersonalizedLatent<f64>;
pub type Latent32 = latentspace::PersonalizedLatent<f32>;
pub type NativeCodes = latentspace::NativeLatentStack<f64>;
pub type NativeCodes32 = latentspace::NativeLatentStack<f32>;
pub type Keypoints = facekit::GroupedKeypoints<f64>;
pub type Keypoints32 = facekit::GroupedKeypoints<f32>;
pub type Descriptor = facekit::NormalizedKeypointDescriptor<f64>;
pub type Descriptor32 = facekit::NormalizedKeypointDescriptor<f32>;
pub type Distances = scanselect::DistanceMatrix<f64>;
pub type Distances32 = scanselect::DistanceMatrix<f32>;
pub type FaceParams = genbackend::toy::ToyFaceParams<f64>;
pub type FaceParams32 = genbackend::toy::ToyFaceParams<f32>;
