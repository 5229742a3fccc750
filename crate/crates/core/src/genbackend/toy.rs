//! Analytic toy face generator.
//!
//! Faces are alpha-composited smooth ellipse masks `σ(k·(1 − q))`, where `q`
//! is the ellipse's quadratic form. Sixteen face parameters are read from
//! the per-layer native codes through an affine map followed by a sigmoid
//! squash, with pose on layer 0, eyes on layer 1, mouth on layer 2 and iris
//! color on layer 3. Keypoints are closed-form samples of the same ellipses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facekit::{
    select_subset, GroupedKeypoints, KeypointDetector, KeypointFrame, KeypointIndexTable, Point3,
    MESH_POINTS,
};
use crate::latentspace::NativeLatentStack;
use crate::raster::{Raster, Rect, Similarity};
use crate::scalar::{sigmoid, Scalar};

pub const TOY_RESOLUTION: usize = 64;
pub const TOY_DIM: usize = 8;
pub const TOY_LAYERS: usize = 4;
pub const PARAM_COUNT: usize = 16;

/// Mask edge sharpness `k` for an ellipse of radius [`EDGE_REFERENCE_RADIUS`].
pub const EDGE_SHARPNESS: f64 = 20.0;

/// Radius (canvas units) at which the mask sharpness equals [`EDGE_SHARPNESS`].
/// Smaller ellipses get proportionally softer logits so that every edge has
/// about the same width in pixels.
pub const EDGE_REFERENCE_RADIUS: f64 = 0.3;

/// Masks whose logit falls below this are treated as exactly zero.
const MASK_CUTOFF: f64 = -40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyParam {
    Cx,
    Cy,
    Scale,
    Yaw,
    EyeOpenL,
    EyeOpenR,
    IrisDxL,
    IrisDyL,
    IrisDxR,
    IrisDyR,
    MouthOpen,
    MouthWidth,
    Teeth,
    IrisRed,
    IrisGreen,
    IrisBlue,
}

impl ToyParam {
    pub const ALL: [ToyParam; PARAM_COUNT] = [
        ToyParam::Cx,
        ToyParam::Cy,
        ToyParam::Scale,
        ToyParam::Yaw,
        ToyParam::EyeOpenL,
        ToyParam::EyeOpenR,
        ToyParam::IrisDxL,
        ToyParam::IrisDyL,
        ToyParam::IrisDxR,
        ToyParam::IrisDyR,
        ToyParam::MouthOpen,
        ToyParam::MouthWidth,
        ToyParam::Teeth,
        ToyParam::IrisRed,
        ToyParam::IrisGreen,
        ToyParam::IrisBlue,
    ];

    pub const POSE: [ToyParam; 4] = [ToyParam::Cx, ToyParam::Cy, ToyParam::Scale, ToyParam::Yaw];

    pub const EXPRESSION: [ToyParam; 9] = [
        ToyParam::EyeOpenL,
        ToyParam::EyeOpenR,
        ToyParam::IrisDxL,
        ToyParam::IrisDyL,
        ToyParam::IrisDxR,
        ToyParam::IrisDyR,
        ToyParam::MouthOpen,
        ToyParam::MouthWidth,
        ToyParam::Teeth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn range(self) -> (f64, f64) {
        use ToyParam::*;
        match self {
            Cx => (0.40, 0.60),
            Cy => (0.42, 0.58),
            Scale => (0.80, 1.10),
            Yaw => (-0.35, 0.35),
            EyeOpenL | EyeOpenR | MouthOpen | Teeth | IrisRed | IrisGreen | IrisBlue => (0.0, 1.0),
            IrisDxL | IrisDyL | IrisDxR | IrisDyR => (-1.0, 1.0),
            MouthWidth => (0.7, 1.3),
        }
    }

    pub fn span(self) -> f64 {
        let (lo, hi) = self.range();
        hi - lo
    }

    pub fn midpoint(self) -> f64 {
        let (lo, hi) = self.range();
        0.5 * (lo + hi)
    }

    /// Generator layer whose code drives this parameter.
    pub fn layer(self) -> usize {
        match self.index() {
            0..=3 => 0,
            4..=9 => 1,
            10..=12 => 2,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        use ToyParam::*;
        match self {
            Cx => "cx",
            Cy => "cy",
            Scale => "scale",
            Yaw => "yaw",
            EyeOpenL => "eye_open_l",
            EyeOpenR => "eye_open_r",
            IrisDxL => "iris_dx_l",
            IrisDyL => "iris_dy_l",
            IrisDxR => "iris_dx_r",
            IrisDyR => "iris_dy_r",
            MouthOpen => "mouth_open",
            MouthWidth => "mouth_width",
            Teeth => "teeth",
            IrisRed => "iris_r",
            IrisGreen => "iris_g",
            IrisBlue => "iris_b",
        }
    }
}

/// The sixteen toy face parameters, indexed by [`ToyParam`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFaceParams<T = f64> {
    pub values: [T; PARAM_COUNT],
}

impl<T: Scalar> ToyFaceParams<T> {
    pub fn midpoint() -> Self {
        Self {
            values: ToyParam::ALL.map(|p| T::cst(p.midpoint())),
        }
    }

    #[inline]
    pub fn get(&self, p: ToyParam) -> T {
        self.values[p.index()]
    }

    #[inline]
    pub fn set(&mut self, p: ToyParam, v: T) {
        self.values[p.index()] = v;
    }

    pub fn with(mut self, p: ToyParam, v: T) -> Self {
        self.set(p, v);
        self
    }

    pub fn to_f64(&self) -> ToyFaceParams<f64> {
        ToyFaceParams {
            values: self.values.map(|v| v.re()),
        }
    }

    pub fn in_range(&self) -> bool {
        ToyParam::ALL.iter().all(|p| {
            let (lo, hi) = p.range();
            let v = self.get(*p).re();
            v >= lo && v <= hi
        })
    }
}

impl ToyFaceParams<f64> {
    pub fn cast<T: Scalar>(&self) -> ToyFaceParams<T> {
        ToyFaceParams {
            values: self.values.map(T::cst),
        }
    }
}

/// Per-person face geometry, in canvas units scaled by the head scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyIdentity {
    pub head_rx: f64,
    pub head_ry: f64,
    pub eye_dx: f64,
    pub eye_dy: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub iris_r: f64,
    pub mouth_dy: f64,
    pub mouth_rx: f64,
    pub mouth_ry: f64,
}

impl Default for ToyIdentity {
    fn default() -> Self {
        Self {
            head_rx: 0.30,
            head_ry: 0.38,
            eye_dx: 0.11,
            eye_dy: -0.06,
            eye_rx: 0.065,
            eye_ry: 0.035,
            iris_r: 0.026,
            mouth_dy: 0.16,
            mouth_rx: 0.10,
            mouth_ry: 0.05,
        }
    }
}

impl ToyIdentity {
    /// A second person: wider-set eyes, rounder head, lower mouth; the
    /// feature sizes match the default.
    pub fn alternate() -> Self {
        Self {
            head_rx: 0.34,
            head_ry: 0.34,
            eye_dx: 0.14,
            eye_dy: -0.09,
            mouth_dy: 0.19,
            ..Self::default()
        }
    }
}

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub background: Rgb,
    pub skin: Rgb,
    pub eye_white: Rgb,
    pub lips: Rgb,
    pub teeth: Rgb,
    pub cavity: Rgb,
    /// Iris colors are rendered as `1 − c`.
    pub invert_iris: bool,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            background: [0.15, 0.20, 0.30],
            skin: [0.90, 0.75, 0.60],
            eye_white: [0.95, 0.95, 0.95],
            lips: [0.75, 0.30, 0.30],
            teeth: [0.95, 0.95, 0.90],
            cavity: [0.25, 0.05, 0.05],
            invert_iris: false,
        }
    }
}

impl Palette {
    /// Complementary palette; renders are the per-pixel complement.
    pub fn inverted(&self) -> Self {
        let inv = |c: Rgb| c.map(|v| 1.0 - v);
        Self {
            background: inv(self.background),
            skin: inv(self.skin),
            eye_white: inv(self.eye_white),
            lips: inv(self.lips),
            teeth: inv(self.teeth),
            cavity: inv(self.cavity),
            invert_iris: !self.invert_iris,
        }
    }
}

/// What a toy frame depicts, carried alongside its pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyFace {
    pub identity: ToyIdentity,
    pub palette: Palette,
    pub params: ToyFaceParams<f64>,
    /// Set once the frame has been resampled; `None` for rendered frames.
    #[serde(default)]
    pub view: Option<ToyView>,
}

impl ToyFace {
    /// Parameters of a direct render showing the face where a frame of
    /// `frame_size` shows it. The rotation part of the view is dropped.
    pub fn apparent_params(&self, frame_size: (usize, usize)) -> ToyFaceParams<f64> {
        let Some(view) = self.view else {
            return self.params;
        };
        let (wr, hr) = (view.render_size.0 as f64, view.render_size.1 as f64);
        let (wf, hf) = (frame_size.0 as f64, frame_size.1 as f64);
        let p = &self.params;
        let (x, y) = view.to_frame.apply(p.get(ToyParam::Cx) * wr, p.get(ToyParam::Cy) * hr);
        p.with(ToyParam::Cx, x / wf)
            .with(ToyParam::Cy, y / hf)
            .with(ToyParam::Scale, p.get(ToyParam::Scale) * view.to_frame.scale() * wr / wf)
    }
}

/// Where a resampled toy frame's pixels came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyView {
    /// `(width, height)` of the original render.
    pub render_size: (usize, usize),
    /// Render pixels to frame pixels.
    pub to_frame: Similarity,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse<T> {
    x: T,
    y: T,
    rx: T,
    ry: T,
}

impl<T: Scalar> Ellipse<T> {
    #[inline]
    fn q(&self, u: T, v: T) -> T {
        let a = (u - self.x) / self.rx;
        let b = (v - self.y) / self.ry;
        a * a + b * b
    }

    /// `k` scaled by the harmonic mean of the radii.
    #[inline]
    fn sharpness(&self) -> T {
        let r = T::cst(2.0) * self.rx * self.ry / (self.rx + self.ry);
        T::cst(EDGE_SHARPNESS / EDGE_REFERENCE_RADIUS) * r
    }

    #[inline]
    fn mask(&self, u: T, v: T) -> T {
        let z = self.sharpness() * (T::one() - self.q(u, v));
        if z.re() < MASK_CUTOFF {
            T::zero()
        } else {
            sigmoid(z)
        }
    }

    fn sample(&self, theta: f64) -> (T, T) {
        (
            self.x + self.rx * T::cst(theta.cos()),
            self.y + self.ry * T::cst(theta.sin()),
        )
    }
}

/// Face layout in canvas units, derived from identity and parameters.
struct Geometry<T> {
    cx: T,
    yaw: T,
    head: Ellipse<T>,
    /// Left (subject's left, image right) then right eye.
    eyes: [Ellipse<T>; 2],
    eye_gate: [T; 2],
    irises: [Ellipse<T>; 2],
    gaze: [(T, T); 2],
    lips: Ellipse<T>,
    cavity: Ellipse<T>,
    cavity_gate: T,
    /// Horizontal shift of inner features from the yaw proxy.
    shift: T,
}

impl<T: Scalar> Geometry<T> {
    fn new(id: &ToyIdentity, p: &ToyFaceParams<T>) -> Self {
        use ToyParam::*;
        let c = T::cst;
        let (cx, cy, s, yaw) = (p.get(Cx), p.get(Cy), p.get(Scale), p.get(Yaw));
        let head = Ellipse {
            x: cx,
            y: cy,
            rx: c(id.head_rx) * s,
            ry: c(id.head_ry) * s,
        };
        let shift = yaw * c(0.4 * id.head_rx) * s;
        let eye = |side: f64, open: T, dx: T, dy: T| {
            let rx = c(id.eye_rx) * s * (T::one() - c(0.3 * side) * yaw);
            let e = Ellipse {
                x: cx + shift + c(side * id.eye_dx) * s,
                y: cy + c(id.eye_dy) * s,
                rx,
                ry: c(id.eye_ry) * s * (c(0.05) + c(0.95) * open),
            };
            let iris = Ellipse {
                x: e.x + dx * c(0.6 * id.eye_rx) * s,
                y: e.y + dy * c(0.5 * id.eye_ry) * s,
                rx: c(id.iris_r) * s,
                ry: c(id.iris_r) * s,
            };
            (e, (c(8.0) * open).tanh(), iris)
        };
        let (el, gl, il) = eye(1.0, p.get(EyeOpenL), p.get(IrisDxL), p.get(IrisDyL));
        let (er, gr, ir) = eye(-1.0, p.get(EyeOpenR), p.get(IrisDxR), p.get(IrisDyR));
        let open = p.get(MouthOpen);
        let mx = cx + shift;
        let my = cy + c(id.mouth_dy) * s;
        let lips_rx = c(id.mouth_rx) * s * p.get(MouthWidth);
        let lips = Ellipse {
            x: mx,
            y: my,
            rx: lips_rx,
            ry: c(id.mouth_ry) * s * (c(0.7) + c(0.6) * open),
        };
        let cavity = Ellipse {
            x: mx,
            y: my,
            rx: c(0.8) * lips_rx,
            ry: c(id.mouth_ry) * s * (c(0.08) + c(0.92) * open),
        };
        Self {
            cx,
            yaw,
            head,
            eyes: [el, er],
            eye_gate: [gl, gr],
            irises: [il, ir],
            gaze: [
                (p.get(IrisDxL), p.get(IrisDyL)),
                (p.get(IrisDxR), p.get(IrisDyR)),
            ],
            lips,
            cavity,
            cavity_gate: (c(8.0) * open).tanh(),
            shift,
        }
    }

    /// Depth proxy from the yaw: points turn about the head's vertical axis.
    #[inline]
    fn depth(&self, u: T) -> T {
        -self.yaw * (u - self.cx) * T::cst(0.5)
    }
}

#[inline]
fn blend<T: Scalar>(acc: &mut [T; 3], color: [T; 3], m: T) {
    if m.re() == 0.0 && m == T::zero() {
        return;
    }
    let keep = T::one() - m;
    for k in 0..3 {
        acc[k] = acc[k] * keep + color[k] * m;
    }
}

fn lift<T: Scalar>(c: Rgb) -> [T; 3] {
    c.map(T::cst)
}

/// Renders the pixels of `rect` of a `resolution × resolution` canvas.
pub fn render_params_rect<T: Scalar>(
    identity: &ToyIdentity,
    palette: &Palette,
    params: &ToyFaceParams<T>,
    resolution: usize,
    rect: Rect,
) -> Result<Raster<T>> {
    if rect.is_empty() || rect.x1 > resolution || rect.y1 > resolution {
        return Err(Error::ShapeMismatch(format!(
            "rect {rect:?} outside {resolution}x{resolution} canvas"
        )));
    }
    let g = Geometry::new(identity, params);
    let iris: [T; 3] = [ToyParam::IrisRed, ToyParam::IrisGreen, ToyParam::IrisBlue].map(|p| {
        let v = params.get(p);
        if palette.invert_iris {
            T::one() - v
        } else {
            v
        }
    });
    let teeth = params.get(ToyParam::Teeth);
    let cavity: [T; 3] = std::array::from_fn(|k| {
        teeth * T::cst(palette.teeth[k]) + (T::one() - teeth) * T::cst(palette.cavity[k])
    });
    let inv = 1.0 / resolution as f64;
    let mut data = Vec::with_capacity(rect.width() * rect.height() * 3);
    for y in rect.y0..rect.y1 {
        let v = T::cst((y as f64 + 0.5) * inv);
        for x in rect.x0..rect.x1 {
            let u = T::cst((x as f64 + 0.5) * inv);
            let mut px = lift::<T>(palette.background);
            blend(&mut px, lift(palette.skin), g.head.mask(u, v));
            for e in 0..2 {
                let me = g.eyes[e].mask(u, v) * g.eye_gate[e];
                blend(&mut px, lift(palette.eye_white), me);
                if me.re() != 0.0 {
                    blend(&mut px, iris, g.irises[e].mask(u, v) * me);
                }
            }
            blend(&mut px, lift(palette.lips), g.lips.mask(u, v));
            blend(&mut px, cavity, g.cavity.mask(u, v) * g.cavity_gate);
            data.extend_from_slice(&px);
        }
    }
    Raster::new(rect.width(), rect.height(), 3, data)
}

/// Renders a full canvas from parameters.
pub fn toy_render(
    identity: &ToyIdentity,
    palette: &Palette,
    params: &ToyFaceParams<f64>,
    resolution: usize,
) -> Raster<f64> {
    render_params_rect(
        identity,
        palette,
        params,
        resolution,
        Rect::new(0, 0, resolution, resolution),
    )
    .expect("full canvas rect is valid")
    .with_annotation(Some(ToyFace {
        identity: identity.clone(),
        palette: palette.clone(),
        params: *params,
        view: None,
    }))
}

/// The 66 subset keypoints plus the outer lip contour, in pixels of a
/// `width × height` frame.
pub fn toy_keypoints<T: Scalar>(
    identity: &ToyIdentity,
    params: &ToyFaceParams<T>,
    width: usize,
    height: usize,
) -> GroupedKeypoints<T> {
    let g = Geometry::new(identity, params);
    let (sw, sh) = (T::cst(width as f64), T::cst(height as f64));
    let px = |u: T, v: T, dz: T| -> Point3<T> { [u * sw, v * sh, (g.depth(u) + dz) * sw] };
    let ring = |e: &Ellipse<T>, count: usize| -> Vec<Point3<T>> {
        (0..count)
            .map(|j| {
                let (u, v) = e.sample(std::f64::consts::TAU * j as f64 / count as f64);
                px(u, v, T::zero())
            })
            .collect()
    };
    let iris = |k: usize| -> Vec<Point3<T>> {
        let e = &g.irises[k];
        let (gx, gy) = g.gaze[k];
        let r = e.rx;
        let z = T::zero();
        [(z, z), (r, z), (z, r), (-r, z), (z, -r)]
            .iter()
            .map(|&(ox, oy)| {
                // The iris disk tilts toward the gaze direction.
                let tilt = -(gx * ox + gy * oy) * T::cst(0.8);
                px(e.x + ox, e.y + oy, tilt)
            })
            .collect()
    };
    let h = &g.head;
    let head_frame = vec![
        px(h.x + g.shift, h.y - h.ry, T::zero()),
        px(h.x + g.shift, h.y + h.ry, T::zero()),
        px(h.x - h.rx, h.y, T::zero()),
        px(h.x + h.rx, h.y, T::zero()),
    ];
    GroupedKeypoints::new(
        [
            ring(&g.eyes[0], 16),
            ring(&g.eyes[1], 16),
            iris(0),
            iris(1),
            ring(&g.cavity, 20),
            head_frame,
        ],
        Some(ring(&g.lips, 20)),
    )
    .expect("toy layout has the subset group sizes")
}

/// Full 468-point layout: the subset keypoints at the default table's
/// indices, every other mesh point sampled along the head outline.
pub fn toy_mesh<T: Scalar>(
    identity: &ToyIdentity,
    params: &ToyFaceParams<T>,
    width: usize,
    height: usize,
) -> Result<KeypointFrame<T>> {
    let table = KeypointIndexTable::default();
    let gk = toy_keypoints(identity, params, width, height);
    let mut points: Vec<Option<Point3<T>>> = vec![None; MESH_POINTS];
    for group in crate::facekit::KeypointGroup::ALL {
        for (i, p) in table.indices(group).iter().zip(gk.group(group)) {
            points[*i] = Some(*p);
        }
    }
    if let (Some(outer), Some(idx)) = (gk.mouth_outer(), table.mouth_outer.as_ref()) {
        for (i, p) in idx.iter().zip(outer) {
            points[*i] = Some(*p);
        }
    }
    let free = points.iter().filter(|p| p.is_none()).count();
    let g = Geometry::new(identity, params);
    let (sw, sh) = (T::cst(width as f64), T::cst(height as f64));
    let mut k = 0;
    for slot in points.iter_mut().filter(|p| p.is_none()) {
        let (u, v) = g.head.sample(std::f64::consts::TAU * k as f64 / free as f64);
        *slot = Some([u * sw, v * sh, g.depth(u) * sw]);
        k += 1;
    }
    KeypointFrame::new(points.into_iter().flatten().collect(), (width, height))
}

/// Affine map from one layer's code to the parameter logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    /// Row-major `PARAM_COUNT × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
}

impl Default for AffineMap {
    fn default() -> Self {
        let mut weights = vec![0.0; PARAM_COUNT * TOY_DIM];
        let mut w = |p: ToyParam, k: usize, v: f64| weights[p.index() * TOY_DIM + k] = v;
        use ToyParam::*;
        w(Cx, 0, 2.0);
        w(Cy, 1, 2.0);
        w(Scale, 2, 2.0);
        w(Yaw, 3, 2.0);
        w(EyeOpenL, 4, 3.0);
        w(EyeOpenR, 5, 3.0);
        w(MouthOpen, 6, 3.0);
        w(MouthWidth, 6, -1.0);
        w(Teeth, 6, 2.0);
        w(IrisDxL, 7, 2.0);
        w(IrisDxR, 7, 2.0);
        w(IrisDyL, 7, 1.0);
        w(IrisDyR, 7, 1.0);
        Self {
            weights,
            bias: vec![0.0; PARAM_COUNT],
            dim: TOY_DIM,
        }
    }
}

impl AffineMap {
    pub fn row(&self, p: ToyParam) -> &[f64] {
        &self.weights[p.index() * self.dim..(p.index() + 1) * self.dim]
    }

    /// Parameter logit `W_p · code + b_p`.
    pub fn logit<T: Scalar>(&self, p: ToyParam, code: &[T]) -> T {
        self.row(p)
            .iter()
            .zip(code)
            .fold(T::cst(self.bias[p.index()]), |acc, (w, c)| acc + T::cst(*w) * *c)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// `p = lo + (hi − lo)·σ(W_p · code_{layer(p)} + b_p)`.
pub fn toy_params_from_codes<T: Scalar>(
    codes: &NativeLatentStack<T>,
    map: &AffineMap,
) -> Result<ToyFaceParams<T>> {
    if codes.layers() != TOY_LAYERS || codes.dim() != map.dim {
        return Err(Error::DimensionMismatch(format!(
            "toy generator expects {TOY_LAYERS} layers of dimension {}, got {} of {}",
            map.dim,
            codes.layers(),
            codes.dim()
        )));
    }
    Ok(ToyFaceParams {
        values: ToyParam::ALL.map(|p| {
            let (lo, hi) = p.range();
            T::cst(lo) + T::cst(hi - lo) * sigmoid(map.logit(p, codes.layer(p.layer())))
        }),
    })
}

/// Reads keypoints of toy frames from their annotation.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyKeypointDetector;

impl KeypointDetector for ToyKeypointDetector {
    fn id(&self) -> &str {
        "toy"
    }

    fn detect(&self, image: &Raster<f64>) -> Result<KeypointFrame<f64>> {
        let face = image
            .annotation
            .as_ref()
            .ok_or(Error::NoFaceDetected { frame: None })?;
        let Some(view) = face.view else {
            return toy_mesh(&face.identity, &face.params, image.width(), image.height());
        };
        let (w, h) = view.render_size;
        let t = view.to_frame;
        let points = toy_mesh(&face.identity, &face.params, w, h)?
            .points()
            .iter()
            .map(|p| {
                let (x, y) = t.apply(p[0], p[1]);
                [x, y, p[2] * t.scale()]
            })
            .collect();
        KeypointFrame::new(points, (image.width(), image.height()))
    }
}

/// Subset keypoints of a toy frame under `table`.
pub fn detect_grouped(
    image: &Raster<f64>,
    table: &KeypointIndexTable,
) -> Result<GroupedKeypoints<f64>> {
    let kf = crate::facekit::extract_keypoints(image, &ToyKeypointDetector)?;
    select_subset(&kf, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facekit::KeypointGroup;
    use crate::scalar::Dual;
    use proptest::prelude::*;

    fn neutral() -> ToyFaceParams<f64> {
        ToyFaceParams::midpoint()
    }

    fn render(params: &ToyFaceParams<f64>) -> Raster<f64> {
        toy_render(&ToyIdentity::default(), &Palette::default(), params, TOY_RESOLUTION)
    }

    #[test]
    fn zero_codes_give_midpoint_parameters() {
        let codes = NativeLatentStack::<f64>::zeros(TOY_LAYERS, TOY_DIM);
        let p = toy_params_from_codes(&codes, &AffineMap::default()).unwrap();
        for q in ToyParam::ALL {
            assert!((p.get(q) - q.midpoint()).abs() < 1e-15);
        }
    }

    #[test]
    fn last_layer_perturbation_leaves_pose_unchanged() {
        let map = AffineMap::default();
        let base = NativeLatentStack::<f64>::zeros(TOY_LAYERS, TOY_DIM);
        let mut moved = base.clone();
        moved.layer_mut(3).copy_from_slice(&[0.7, -1.2, 0.3, 2.0, -0.4, 0.9, 1.1, -0.6]);
        let a = toy_params_from_codes(&base, &map).unwrap();
        let b = toy_params_from_codes(&moved, &map).unwrap();
        for q in ToyParam::POSE {
            assert_eq!(a.get(q), b.get(q));
        }
    }

    #[test]
    fn wrong_dimension_rejected() {
        let codes = NativeLatentStack::<f64>::zeros(TOY_LAYERS, 5);
        assert!(matches!(
            toy_params_from_codes(&codes, &AffineMap::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn closed_eye_hides_iris() {
        let open = neutral();
        let closed = open
            .with(ToyParam::EyeOpenL, 0.0)
            .with(ToyParam::IrisRed, 0.0)
            .with(ToyParam::IrisGreen, 0.0)
            .with(ToyParam::IrisBlue, 1.0);
        let img = render(&closed);
        let no_eye = render(&closed.with(ToyParam::IrisBlue, 0.0));
        let gk = toy_keypoints(&ToyIdentity::default(), &closed, TOY_RESOLUTION, TOY_RESOLUTION);
        let rect = crate::facekit::region_rect(gk.group(KeypointGroup::LeftIris), 64, 64, crate::facekit::Region::LeftEye).unwrap();
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                for c in 0..3 {
                    assert!((img.get(x, y, c) - no_eye.get(x, y, c)).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn mouth_opening_changes_mouth_region() {
        let dark = neutral().with(ToyParam::Teeth, 0.0);
        let shut = dark.with(ToyParam::MouthOpen, 0.0);
        let open = dark.with(ToyParam::MouthOpen, 1.0);
        let gk = toy_keypoints(&ToyIdentity::default(), &open, 64, 64);
        let rect = crate::facekit::region_rect(gk.mouth_outer().unwrap(), 64, 64, crate::facekit::Region::Mouth).unwrap();
        let a = render(&shut).crop(rect).unwrap().mean();
        let b = render(&open).crop(rect).unwrap().mean();
        assert!((a - b).abs() > 0.1, "{a} vs {b}");
    }

    #[test]
    fn render_is_deterministic() {
        let p = neutral().with(ToyParam::Yaw, 0.2);
        assert_eq!(render(&p), render(&p));
    }

    #[test]
    fn inverted_palette_renders_complement() {
        let p = neutral().with(ToyParam::IrisRed, 0.2).with(ToyParam::MouthOpen, 0.7);
        let a = render(&p);
        let b = toy_render(&ToyIdentity::default(), &Palette::default().inverted(), &p, 64);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x + y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_frame_at_bounding_box_for_neutral() {
        let id = ToyIdentity::default();
        let gk = toy_keypoints(&id, &neutral(), 64, 64);
        let hf = gk.group(KeypointGroup::HeadFrame);
        let (cx, cy, s) = (0.5 * 64.0, 0.5 * 64.0, 0.95);
        let (rx, ry) = (id.head_rx * s * 64.0, id.head_ry * s * 64.0);
        let want = [[cx, cy - ry], [cx, cy + ry], [cx - rx, cy], [cx + rx, cy]];
        for (p, w) in hf.iter().zip(want) {
            assert!((p[0] - w[0]).abs() < 1e-12 && (p[1] - w[1]).abs() < 1e-12);
            assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn mouth_extent_grows_with_opening() {
        let id = ToyIdentity::default();
        let extent = |open: f64| {
            let gk = toy_keypoints(&id, &neutral().with(ToyParam::MouthOpen, open), 64, 64);
            let ys: Vec<f64> = gk.group(KeypointGroup::Mouth).iter().map(|p| p[1]).collect();
            ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min)
        };
        let mut last = extent(0.0);
        for k in 1..=10 {
            let e = extent(k as f64 / 10.0);
            assert!(e > last);
            last = e;
        }
    }

    #[test]
    fn mouth_rect_matches_ellipse_extremes() {
        let id = ToyIdentity::default();
        let p = neutral().with(ToyParam::MouthOpen, 0.8);
        let gk = toy_keypoints(&id, &p, 64, 64);
        let rect = crate::facekit::region_rect(gk.group(KeypointGroup::Mouth), 64, 64, crate::facekit::Region::Mouth).unwrap();
        // Inner lip ellipse in closed form; the 20 samples include the four
        // axis extremes (j = 0, 5, 10, 15).
        let s = 0.95;
        let (mx, my) = (0.5 * 64.0, (0.5 + id.mouth_dy * s) * 64.0);
        let rx = 0.8 * id.mouth_rx * s * 1.0 * 64.0;
        let ry = id.mouth_ry * s * (0.08 + 0.92 * 0.8) * 64.0;
        assert_eq!(rect, Rect::new((mx - rx).floor() as usize, (my - ry).floor() as usize, (mx + rx).ceil() as usize, (my + ry).ceil() as usize));
    }

    #[test]
    fn detector_matches_closed_form() {
        let p = neutral().with(ToyParam::Yaw, -0.1).with(ToyParam::EyeOpenR, 0.3);
        let img = render(&p);
        let table = KeypointIndexTable::default();
        let gk = detect_grouped(&img, &table).unwrap();
        assert_eq!(gk, toy_keypoints(&ToyIdentity::default(), &p, 64, 64));
        let again = ToyKeypointDetector.detect(&img).unwrap();
        assert_eq!(again, ToyKeypointDetector.detect(&img).unwrap());
        let blank = Raster::filled(64, 64, 3, 0.0);
        assert!(matches!(ToyKeypointDetector.detect(&blank), Err(Error::NoFaceDetected { .. })));
    }

    #[test]
    fn mesh_frame_is_valid() {
        let kf = toy_mesh(&ToyIdentity::default(), &neutral(), 64, 64).unwrap();
        assert_eq!(kf.points().len(), MESH_POINTS);
        assert_eq!(kf.off_image_count(), 0);
    }

    fn mean_intensity<T: Scalar>(p: &ToyFaceParams<T>) -> T {
        render_params_rect(&ToyIdentity::default(), &Palette::default(), p, 64, Rect::new(0, 0, 64, 64))
            .unwrap()
            .mean()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_codes_stay_in_range(code in proptest::collection::vec(-20.0..20.0f64, 32)) {
            let stack = NativeLatentStack::new(code.chunks(8).map(<[f64]>::to_vec).collect()).unwrap();
            prop_assert!(toy_params_from_codes(&stack, &AffineMap::default()).unwrap().in_range());
        }

        #[test]
        fn render_gradient_matches_central_difference(
            unit in proptest::collection::vec(0.1..0.9f64, PARAM_COUNT),
        ) {
            let base = ToyFaceParams {
                values: std::array::from_fn(|i| {
                    let (lo, hi) = ToyParam::ALL[i].range();
                    lo + (hi - lo) * unit[i]
                }),
            };
            let h = 1e-4;
            let mut ad = [0.0; PARAM_COUNT];
            let mut fd = [0.0; PARAM_COUNT];
            for q in ToyParam::ALL {
                let mut dual = base.cast::<Dual>();
                dual.set(q, Dual::variable(base.get(q)));
                ad[q.index()] = mean_intensity(&dual).eps;
                let plus = mean_intensity(&base.with(q, base.get(q) + h));
                let minus = mean_intensity(&base.with(q, base.get(q) - h));
                fd[q.index()] = (plus - minus) / (2.0 * h);
            }
            let scale = ad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for q in ToyParam::ALL {
                let i = q.index();
                prop_assert!(
                    (ad[i] - fd[i]).abs() <= 1e-3 * scale,
                    "{}: ad {} fd {}", q.name(), ad[i], fd[i]
                );
            }
        }
    }
}
