//! The personalized subspace: a β-dilated convex hull of anchor latents,
//! parametrized by barycentric coefficients plus per-layer offsets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::store::{self, Manifest};

pub const DEFAULT_BETA: f64 = 0.02;
pub const DEFAULT_SHARPNESS: f64 = 100.0;

/// Above this value of `s·(α+β)` the softplus is evaluated as the identity.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

/// Smallest coefficient sum accepted by [`finalize`].
pub const DEGENERATE_SUM: f64 = 1e-6;

/// Anchor latents `w_i`, one per training image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Vec<f64>>,
    dim: usize,
}

impl AnchorSet {
    pub fn new(anchors: Vec<Vec<f64>>) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::InvalidAnchors(format!(
                "need at least two anchors, got {}",
                anchors.len()
            )));
        }
        let dim = anchors[0].len();
        if dim == 0 {
            return Err(Error::InvalidAnchors("anchors have dimension 0".into()));
        }
        for (i, a) in anchors.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::InvalidAnchors(format!(
                    "anchor {i} has dimension {}, expected {dim}",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidAnchors(format!("anchor {i} is not finite")));
            }
            if let Some(j) = anchors[..i].iter().position(|b| b == a) {
                return Err(Error::InvalidAnchors(format!("anchors {j} and {i} are identical")));
            }
        }
        Ok(Self { anchors, dim })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn anchor(&self, i: usize) -> &[f64] {
        &self.anchors[i]
    }

    /// `Σ_i c_i · w_i`.
    pub fn combine<T: Scalar>(&self, coefficients: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for (c, w) in coefficients.iter().zip(&self.anchors) {
            for (o, v) in out.iter_mut().zip(w) {
                *o += *c * T::cst(*v);
            }
        }
        out
    }
}

/// The dilated hull `𝒫_β` over an anchor set, extended to `L` layers.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizedSpace {
    anchor_set: AnchorSet,
    beta: f64,
    layers: usize,
    sharpness: f64,
}

impl PersonalizedSpace {
    pub fn new(anchor_set: AnchorSet, beta: f64, layers: usize, sharpness: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be >= 0, got {beta}")));
        }
        if layers == 0 {
            return Err(Error::InvalidParameter("layers must be >= 1".into()));
        }
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sharpness must be > 0, got {sharpness}"
            )));
        }
        Ok(Self {
            anchor_set,
            beta,
            layers,
            sharpness,
        })
    }

    /// Space with the default dilation and sharpness.
    pub fn with_defaults(anchor_set: AnchorSet, layers: usize) -> Result<Self> {
        Self::new(anchor_set, DEFAULT_BETA, layers, DEFAULT_SHARPNESS)
    }

    pub fn anchor_set(&self) -> &AnchorSet {
        &self.anchor_set
    }

    pub fn n(&self) -> usize {
        self.anchor_set.len()
    }

    pub fn dim(&self) -> usize {
        self.anchor_set.dim()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    /// SHA-256 over the anchors and parameters at full precision.
    pub fn fingerprint(&self) -> String {
        let a = &self.anchor_set;
        let header = [a.len() as f64, a.dim() as f64, self.beta, self.layers as f64, self.sharpness];
        let bytes: Vec<u8> = header
            .iter()
            .chain(a.anchors().iter().flatten())
            .flat_map(|v| v.to_le_bytes())
            .collect();
        store::sha256_hex(&bytes)
    }
}

/// Whether `alpha` is the optimization variable or already the coefficient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentForm {
    /// `alpha` passes through the shifted softplus before use.
    #[default]
    Raw,
    /// `alpha` holds the coefficients directly.
    Effective,
}

/// A point of `𝒫⁺`: base coefficients `α` and per-layer offsets `Δ_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizedLatent<T = f64> {
    pub alpha: Vec<T>,
    pub deltas: Vec<Vec<T>>,
    pub form: LatentForm,
}

impl<T: Scalar> PersonalizedLatent<T> {
    /// Unconstrained latent with zero offsets.
    pub fn raw(alpha: Vec<T>, layers: usize) -> Self {
        let n = alpha.len();
        Self {
            alpha,
            deltas: vec![vec![T::zero(); n]; layers],
            form: LatentForm::Raw,
        }
    }

    pub fn effective(alpha: Vec<T>, deltas: Vec<Vec<T>>) -> Self {
        Self {
            alpha,
            deltas,
            form: LatentForm::Effective,
        }
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn layers(&self) -> usize {
        self.deltas.len()
    }

    pub fn check(&self, space: &PersonalizedSpace) -> Result<()> {
        if self.alpha.len() != space.n() {
            return Err(Error::DimensionMismatch(format!(
                "latent has {} coefficients, space has {} anchors",
                self.alpha.len(),
                space.n()
            )));
        }
        if self.deltas.len() != space.layers() {
            return Err(Error::DimensionMismatch(format!(
                "latent has {} layers, space has {}",
                self.deltas.len(),
                space.layers()
            )));
        }
        if let Some(l) = self.deltas.iter().position(|d| d.len() != space.n()) {
            return Err(Error::DimensionMismatch(format!(
                "delta {l} has {} entries, expected {}",
                self.deltas[l].len(),
                space.n()
            )));
        }
        Ok(())
    }

    /// `α̃`: the softplus of a raw latent, or `alpha` as stored.
    pub fn alpha_tilde(&self, space: &PersonalizedSpace) -> Vec<T> {
        match self.form {
            LatentForm::Raw => reparametrize(&self.alpha, space.beta(), space.sharpness()),
            LatentForm::Effective => self.alpha.clone(),
        }
    }

    /// Per-layer coefficients `α̃ + Δ_l`.
    pub fn layer_coefficients(&self, space: &PersonalizedSpace) -> Vec<Vec<T>> {
        let base = self.alpha_tilde(space);
        self.deltas
            .iter()
            .map(|d| base.iter().zip(d).map(|(a, b)| *a + *b).collect())
            .collect()
    }

    pub fn to_f64(&self) -> PersonalizedLatent<f64> {
        PersonalizedLatent {
            alpha: self.alpha.iter().map(|v| v.re()).collect(),
            deltas: self
                .deltas
                .iter()
                .map(|d| d.iter().map(|v| v.re()).collect())
                .collect(),
            form: self.form,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(self.deltas.iter().flatten()).all(|v| v.is_finite())
    }
}

impl PersonalizedLatent<f64> {
    pub fn cast<T: Scalar>(&self) -> PersonalizedLatent<T> {
        PersonalizedLatent {
            alpha: self.alpha.iter().map(|v| T::cst(*v)).collect(),
            deltas: self
                .deltas
                .iter()
                .map(|d| d.iter().map(|v| T::cst(*v)).collect())
                .collect(),
            form: self.form,
        }
    }

    /// Equivalent raw latent, inverting the softplus on `alpha`.
    pub fn to_raw(&self, space: &PersonalizedSpace) -> PersonalizedLatent<f64> {
        match self.form {
            LatentForm::Raw => self.clone(),
            LatentForm::Effective => PersonalizedLatent {
                alpha: self
                    .alpha
                    .iter()
                    .map(|a| inverse_softplus(*a, space.beta(), space.sharpness()))
                    .collect(),
                deltas: self.deltas.clone(),
                form: LatentForm::Raw,
            },
        }
    }
}

/// One native code per generator layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NativeLatentStack<T = f64> {
    codes: Vec<Vec<T>>,
}

impl<T: Scalar> NativeLatentStack<T> {
    pub fn new(codes: Vec<Vec<T>>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::DimensionMismatch("stack needs at least one layer".into()));
        }
        let dim = codes[0].len();
        if codes.iter().any(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch("layers differ in dimension".into()));
        }
        if codes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("native codes must be finite".into()));
        }
        Ok(Self { codes })
    }

    /// The same code repeated on every layer.
    pub fn broadcast(code: Vec<T>, layers: usize) -> Result<Self> {
        Self::new(vec![code; layers])
    }

    pub fn zeros(layers: usize, dim: usize) -> Self {
        Self {
            codes: vec![vec![T::zero(); dim]; layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.codes.len()
    }

    pub fn dim(&self) -> usize {
        self.codes[0].len()
    }

    pub fn layer(&self, l: usize) -> &[T] {
        &self.codes[l]
    }

    pub fn codes(&self) -> &[Vec<T>] {
        &self.codes
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [T] {
        &mut self.codes[l]
    }

    pub fn to_f64(&self) -> NativeLatentStack<f64> {
        NativeLatentStack {
            codes: self
                .codes
                .iter()
                .map(|c| c.iter().map(|v| v.re()).collect())
                .collect(),
        }
    }
}

impl NativeLatentStack<f64> {
    pub fn cast<T: Scalar>(&self) -> NativeLatentStack<T> {
        NativeLatentStack {
            codes: self
                .codes
                .iter()
                .map(|c| c.iter().map(|v| T::cst(*v)).collect())
                .collect(),
        }
    }
}

/// Shifted softplus `(1/s)·ln(1 + e^{s(α+β)}) − β` on one value.
#[inline]
pub fn softplus_shifted<T: Scalar>(alpha: T, beta: f64, sharpness: f64) -> T {
    let s = T::cst(sharpness);
    let b = T::cst(beta);
    let z = s * (alpha + b);
    if z.re() > SOFTPLUS_LINEAR_THRESHOLD {
        return alpha;
    }
    let out = z.exp().ln_1p() / s - b;
    // Far below −β the exact value rounds to −β; keep it strictly above.
    let floor = (-beta).next_up();
    if out.re() < floor {
        out + T::cst(floor - out.re())
    } else {
        out
    }
}

/// Derivative of [`softplus_shifted`] with respect to `alpha`.
#[inline]
pub fn softplus_shifted_grad(alpha: f64, beta: f64, sharpness: f64) -> f64 {
    let z = sharpness * (alpha + beta);
    if z > SOFTPLUS_LINEAR_THRESHOLD {
        1.0
    } else {
        sigmoid(z)
    }
}

/// Inverse of [`softplus_shifted`]; values at or below `−β` map to a large
/// negative finite number.
pub fn inverse_softplus(value: f64, beta: f64, sharpness: f64) -> f64 {
    let z = (sharpness * (value + beta)).max(1e-12);
    if z > SOFTPLUS_LINEAR_THRESHOLD {
        value
    } else {
        z.exp_m1().ln() / sharpness - beta
    }
}

pub fn reparametrize<T: Scalar>(alpha_raw: &[T], beta: f64, sharpness: f64) -> Vec<T> {
    alpha_raw
        .iter()
        .map(|a| softplus_shifted(*a, beta, sharpness))
        .collect()
}

/// `(Σ α̃_i − 1)²`.
pub fn sum_regularizer<T: Scalar>(alpha_tilde: &[T]) -> T {
    let e = alpha_tilde.iter().copied().sum::<T>() - T::one();
    e * e
}

/// `Σ_l ‖Δ_l‖₂`, with the zero subgradient at `Δ_l = 0`.
pub fn delta_regularizer<T: Scalar>(deltas: &[Vec<T>]) -> T {
    deltas
        .iter()
        .map(|d| {
            let sq: T = d.iter().map(|v| *v * *v).sum();
            if sq.re() == 0.0 {
                T::zero()
            } else {
                sq.sqrt()
            }
        })
        .sum()
}

/// Layer `l` code `Σ_i (α̃_i + Δ_{l,i}) · w_i`.
pub fn to_native<T: Scalar>(
    pl: &PersonalizedLatent<T>,
    space: &PersonalizedSpace,
) -> Result<NativeLatentStack<T>> {
    pl.check(space)?;
    Ok(coefficients_to_native(&pl.layer_coefficients(space), space))
}

/// The linear part of [`to_native`], applied to explicit per-layer coefficients.
pub fn coefficients_to_native<T: Scalar>(
    coefficients: &[Vec<T>],
    space: &PersonalizedSpace,
) -> NativeLatentStack<T> {
    NativeLatentStack {
        codes: coefficients
            .iter()
            .map(|c| space.anchor_set().combine(c))
            .collect(),
    }
}

/// Uniform coefficients, zero offsets.
pub fn center(space: &PersonalizedSpace) -> PersonalizedLatent<f64> {
    let n = space.n();
    PersonalizedLatent::effective(vec![1.0 / n as f64; n], vec![vec![0.0; n]; space.layers()])
}

/// Euclidean projection onto `{c : c_i ≥ −β, Σ c_i = 1}`.
pub fn project_to_dilated_simplex(c: &[f64], beta: f64) -> Vec<f64> {
    let n = c.len();
    let target = 1.0 + n as f64 * beta;
    let mut y: Vec<f64> = c.iter().map(|v| v + beta).collect();
    let mut sorted = y.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, v) in sorted.iter().enumerate() {
        cumulative += v;
        let t = (cumulative - target) / (k + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    for v in &mut y {
        *v = (*v - theta).max(0.0) - beta;
    }
    y
}

/// Normalizes each layer's coefficients `α̃ + Δ_l` to sum to one.
///
/// The base `α̃` is divided by its sum and each layer by its own sum. A layer
/// whose rescaled coefficients would drop below `−β` is instead projected
/// onto the dilated simplex. The result is stored in effective form with
/// `Δ_l` the difference between layer and base coefficients.
pub fn finalize(
    pl: &PersonalizedLatent<f64>,
    space: &PersonalizedSpace,
) -> Result<PersonalizedLatent<f64>> {
    pl.check(space)?;
    let base = pl.alpha_tilde(space);
    let sum: f64 = base.iter().sum();
    if !sum.is_finite() || sum.abs() < DEGENERATE_SUM {
        return Err(Error::DegenerateSum(sum));
    }
    let alpha: Vec<f64> = base.iter().map(|v| v / sum).collect();
    let floor = -space.beta();
    let deltas = pl
        .layer_coefficients(space)
        .into_iter()
        .map(|c| {
            let s: f64 = c.iter().sum();
            let scaled: Vec<f64> = c.iter().map(|v| v / s).collect();
            let layer = if s.abs() >= DEGENERATE_SUM && scaled.iter().all(|v| *v >= floor) {
                scaled
            } else {
                project_to_dilated_simplex(&c, space.beta())
            };
            layer.iter().zip(&alpha).map(|(c, a)| c - a).collect()
        })
        .collect();
    Ok(PersonalizedLatent::effective(alpha, deltas))
}

/// Membership in `𝒫⁺_β`: every layer's coefficients are at least `−β − tol`
/// and sum to one within `tol`.
pub fn contains(space: &PersonalizedSpace, pl: &PersonalizedLatent<f64>, tol: f64) -> bool {
    if pl.check(space).is_err() {
        return false;
    }
    pl.layer_coefficients(space).iter().all(|c| {
        let s: f64 = c.iter().sum();
        (s - 1.0).abs() <= tol && c.iter().all(|v| *v >= -space.beta() - tol)
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceMeta {
    n: usize,
    dim: usize,
    beta: f64,
    layers: usize,
    sharpness: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatentMeta {
    n: usize,
    layers: usize,
    form: LatentForm,
}

/// Writes the anchors and space parameters to `dir/space.json`.
pub fn save_space(dir: &Path, space: &PersonalizedSpace) -> Result<()> {
    let a = space.anchor_set();
    let blob = store::write_blob(
        dir,
        "anchors",
        a.anchors().iter().flatten().copied(),
        vec![a.len(), a.dim()],
    )?;
    let mut manifest = Manifest::new(
        "personalized_space",
        SpaceMeta {
            n: a.len(),
            dim: a.dim(),
            beta: space.beta(),
            layers: space.layers(),
            sharpness: space.sharpness(),
        },
    );
    manifest.blobs.insert("anchors".into(), blob);
    store::write_json(&dir.join("space.json"), &manifest)
}

pub fn load_space(dir: &Path) -> Result<PersonalizedSpace> {
    let path = dir.join("space.json");
    let manifest: Manifest<SpaceMeta> = store::read_manifest(&path, "personalized_space")?;
    let blob = manifest.blob("anchors", &path)?;
    let m = &manifest.meta;
    if blob.shape != [m.n, m.dim] {
        return Err(Error::format(&path, "anchor blob shape disagrees with meta"));
    }
    let values = store::read_blob_f64(dir, blob)?;
    let anchors = AnchorSet::new(values.chunks_exact(m.dim).map(<[f64]>::to_vec).collect())?;
    PersonalizedSpace::new(anchors, m.beta, m.layers, m.sharpness)
}

/// Writes `alpha` and the stacked offsets under `dir/<name>.json`.
pub fn save_latent(dir: &Path, name: &str, pl: &PersonalizedLatent<f64>) -> Result<()> {
    let (n, layers) = (pl.n(), pl.layers());
    let mut manifest = Manifest::new("personalized_latent", LatentMeta { n, layers, form: pl.form });
    manifest.blobs.insert(
        "alpha".into(),
        store::write_blob(dir, &format!("{name}.alpha"), pl.alpha.iter().copied(), vec![n])?,
    );
    manifest.blobs.insert(
        "deltas".into(),
        store::write_blob(
            dir,
            &format!("{name}.deltas"),
            pl.deltas.iter().flatten().copied(),
            vec![layers, n],
        )?,
    );
    store::write_json(&dir.join(format!("{name}.json")), &manifest)
}

pub fn load_latent(dir: &Path, name: &str) -> Result<PersonalizedLatent<f64>> {
    let path = dir.join(format!("{name}.json"));
    let manifest: Manifest<LatentMeta> = store::read_manifest(&path, "personalized_latent")?;
    let m = &manifest.meta;
    let alpha = store::read_blob_f64(dir, manifest.blob("alpha", &path)?)?;
    let deltas = store::read_blob_f64(dir, manifest.blob("deltas", &path)?)?;
    if alpha.len() != m.n || deltas.len() != m.n * m.layers {
        return Err(Error::format(&path, "latent blobs disagree with meta"));
    }
    Ok(PersonalizedLatent {
        alpha,
        deltas: deltas.chunks_exact(m.n.max(1)).map(<[f64]>::to_vec).collect(),
        form: m.form,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::derivative;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(n: usize, dim: usize, layers: usize, seed: u64) -> PersonalizedSpace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        PersonalizedSpace::with_defaults(AnchorSet::new(anchors).unwrap(), layers).unwrap()
    }

    #[test]
    fn softplus_reference_values() {
        // Frozen from a 40-digit evaluation of ln(1 + e^2) / 100 - 0.02.
        let v = softplus_shifted::<f64>(0.0, 0.02, 100.0);
        assert!((v - 0.001_269_280_110_429_725_6).abs() < 1e-15, "{v}");
        assert!((softplus_shifted::<f64>(1.0, 0.02, 100.0) - 1.0).abs() < 1e-9);
        assert!((softplus_shifted::<f64>(-10.0, 0.02, 100.0) + 0.02).abs() < 1e-9);
    }

    #[test]
    fn softplus_is_continuous_at_branch_switch() {
        let at = SOFTPLUS_LINEAR_THRESHOLD / 100.0 - 0.02;
        let below = softplus_shifted(at - 1e-12, 0.02, 100.0);
        let above = softplus_shifted(at + 1e-12, 0.02, 100.0);
        // The two samples differ by 2e-12 along a unit slope; the branch jump is ~1e-15.
        assert!((above - below - 2e-12).abs() < 1e-13, "{}", above - below);
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for a in [-0.05, -0.01, 0.0, 0.004, 0.2, 0.9, 3.0] {
            let v = softplus_shifted(a, 0.02, 100.0);
            let back = inverse_softplus(v, 0.02, 100.0);
            assert!((back - a).abs() < 1e-8, "{a} -> {v} -> {back}");
        }
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(sum_regularizer(&[0.25, 0.75]), 0.0);
        assert_eq!(sum_regularizer(&[0.2; 5]), 0.0);
        assert_eq!(sum_regularizer(&[0.0; 4]), 1.0);
        assert_eq!(delta_regularizer::<f64>(&[vec![0.0; 3], vec![0.0; 3]]), 0.0);
        assert_eq!(delta_regularizer(&[vec![3.0, 4.0, 0.0]]), 5.0);
    }

    #[test]
    fn delta_regularizer_matches_norm_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let deltas: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let oracle: f64 = deltas
                .iter()
                .map(|d| d.iter().fold(0.0, |a, v| a + v * v).sqrt())
                .sum();
            assert!((delta_regularizer(&deltas) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_and_uniform_give_anchor_and_mean() {
        let sp = space(4, 3, 2, 1);
        let mut alpha = vec![0.0; 4];
        alpha[2] = 1.0;
        let one_hot = PersonalizedLatent::effective(alpha, vec![vec![0.0; 4]; 2]);
        let stack = to_native(&one_hot, &sp).unwrap();
        for l in 0..2 {
            assert_eq!(stack.layer(l), sp.anchor_set().anchor(2));
        }
        let mean: Vec<f64> = (0..3)
            .map(|d| sp.anchor_set().anchors().iter().map(|a| a[d]).sum::<f64>() / 4.0)
            .collect();
        let stack = to_native(&center(&sp), &sp).unwrap();
        for l in 0..2 {
            for d in 0..3 {
                assert!((stack.layer(l)[d] - mean[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn to_native_matches_explicit_sum() {
        let sp = space(5, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pl = PersonalizedLatent {
            alpha: (0..5).map(|_| rng.random_range(-0.5..0.8)).collect(),
            deltas: (0..3)
                .map(|_| (0..5).map(|_| rng.random_range(-0.2..0.2)).collect())
                .collect(),
            form: LatentForm::Raw,
        };
        let stack = to_native(&pl, &sp).unwrap();
        for l in 0..3 {
            for d in 0..4 {
                let mut acc = 0.0_f64;
                for i in 0..5 {
                    let at = (100.0_f64 * (pl.alpha[i] + 0.02_f64)).exp().ln_1p() / 100.0 - 0.02;
                    acc += (at + pl.deltas[l][i]) * sp.anchor_set().anchor(i)[d];
                }
                assert!((stack.layer(l)[d] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn to_native_rejects_mismatched_latent() {
        let sp = space(4, 3, 2, 1);
        let pl = PersonalizedLatent::<f64>::raw(vec![0.1; 3], 2);
        assert!(matches!(to_native(&pl, &sp), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn finalize_examples() {
        let sp = space(4, 3, 2, 4);
        let pl = PersonalizedLatent::effective(vec![0.2, 0.4, 0.6, 0.8], vec![vec![0.0; 4]; 2]);
        let f = finalize(&pl, &sp).unwrap();
        assert_eq!(f.alpha, vec![0.1, 0.2, 0.3, 0.4]);
        assert!(f.deltas.iter().flatten().all(|d| d.abs() < 1e-16));
        let unchanged = finalize(&f, &sp).unwrap();
        assert_eq!(unchanged.alpha, f.alpha);
        let degenerate = PersonalizedLatent::effective(vec![0.5, -0.5, 0.0, 0.0], vec![vec![0.0; 4]; 2]);
        assert!(matches!(finalize(&degenerate, &sp), Err(Error::DegenerateSum(_))));
    }

    #[test]
    fn center_is_uniform_and_contained() {
        let sp = space(4, 2, 3, 5);
        let c = center(&sp);
        assert_eq!(c.alpha, vec![0.25; 4]);
        assert!(contains(&sp, &c, 0.0));
        let zero_beta = PersonalizedSpace::new(sp.anchor_set().clone(), 0.0, 3, 100.0).unwrap();
        assert!(contains(&zero_beta, &center(&zero_beta), 0.0));
    }

    #[test]
    fn contains_rejects_excess_negative_entry() {
        let sp = space(3, 2, 1, 6);
        let beta = sp.beta();
        let pl = PersonalizedLatent::effective(vec![-2.0 * beta, 0.5, 0.5 + 2.0 * beta], vec![vec![0.0; 3]]);
        assert!(!contains(&sp, &pl, 1e-5));
    }

    #[test]
    fn projection_lands_on_dilated_simplex() {
        let p = project_to_dilated_simplex(&[2.0, -1.0, 0.3, -0.05], 0.02);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= -0.02 - 1e-15));
        let inside = [0.1, 0.2, 0.3, 0.4];
        let q = project_to_dilated_simplex(&inside, 0.02);
        for (a, b) in inside.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_and_space_persist() {
        let dir = tempfile::tempdir().unwrap();
        let sp = space(3, 4, 2, 7);
        save_space(dir.path(), &sp).unwrap();
        let back = load_space(dir.path()).unwrap();
        assert_eq!(back.n(), 3);
        assert_eq!(back.layers(), 2);
        for (a, b) in back.anchor_set().anchors().iter().flatten().zip(sp.anchor_set().anchors().iter().flatten()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let pl = PersonalizedLatent::effective(vec![0.5, 0.25, 0.25], vec![vec![0.0, 0.5, -0.5], vec![0.0; 3]]);
        save_latent(dir.path(), "frame0", &pl).unwrap();
        assert_eq!(load_latent(dir.path(), "frame0").unwrap(), pl);
        assert!(matches!(load_latent(dir.path(), "nope"), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn anchor_validation() {
        assert!(AnchorSet::new(vec![vec![1.0]]).is_err());
        assert!(AnchorSet::new(vec![vec![1.0, 2.0], vec![1.0, 2.0]]).is_err());
        assert!(AnchorSet::new(vec![vec![1.0, f64::NAN], vec![1.0, 2.0]]).is_err());
        assert!(AnchorSet::new(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn softplus_bounded_and_monotone(a in -50.0..50.0f64, b in -50.0..50.0f64) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let flo = softplus_shifted(lo, 0.02, 100.0);
            let fhi = softplus_shifted(hi, 0.02, 100.0);
            prop_assert!(flo > -0.02);
            prop_assert!(fhi >= flo);
        }

        #[test]
        fn softplus_close_to_identity_above_tenth(a in 0.1..5.0f64) {
            prop_assert!((softplus_shifted(a, 0.02, 100.0) - a).abs() <= 1e-4);
        }

        #[test]
        fn softplus_gradient_matches_central_difference(a in -0.2..0.25f64) {
            let h = 1e-5;
            let fd = (softplus_shifted(a + h, 0.02, 100.0) - softplus_shifted(a - h, 0.02, 100.0)) / (2.0 * h);
            let analytic = softplus_shifted_grad(a, 0.02, 100.0);
            let ad = derivative(|x| softplus_shifted(x, 0.02, 100.0), a);
            prop_assert!((analytic - fd).abs() <= 1e-4 * fd.abs().max(1e-12));
            prop_assert!((ad - analytic).abs() <= 1e-12);
        }

        #[test]
        fn linear_map_is_linear(
            x in proptest::collection::vec(-1.0..1.0f64, 8),
            y in proptest::collection::vec(-1.0..1.0f64, 8),
            a in -2.0..2.0f64,
            b in -2.0..2.0f64,
        ) {
            let sp = space(4, 3, 2, 11);
            let cx = vec![x[..4].to_vec(), x[4..].to_vec()];
            let cy = vec![y[..4].to_vec(), y[4..].to_vec()];
            let mix: Vec<Vec<f64>> = cx.iter().zip(&cy)
                .map(|(p, q)| p.iter().zip(q).map(|(u, v)| a * u + b * v).collect())
                .collect();
            let lx = coefficients_to_native(&cx, &sp);
            let ly = coefficients_to_native(&cy, &sp);
            let lm = coefficients_to_native(&mix, &sp);
            for l in 0..2 {
                for d in 0..3 {
                    let want = a * lx.layer(l)[d] + b * ly.layer(l)[d];
                    prop_assert!((lm.layer(l)[d] - want).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn finalize_is_idempotent_and_contained(
            alpha in proptest::collection::vec(-0.3..1.0f64, 5),
            deltas in proptest::collection::vec(-0.3..0.3f64, 15),
        ) {
            let sp = space(5, 3, 3, 12);
            let pl = PersonalizedLatent {
                alpha,
                deltas: deltas.chunks(5).map(<[f64]>::to_vec).collect(),
                form: LatentForm::Raw,
            };
            let f = finalize(&pl, &sp).unwrap();
            prop_assert!(contains(&sp, &f, 1e-9));
            let g = finalize(&f, &sp).unwrap();
            for (a, b) in f.alpha.iter().chain(f.deltas.iter().flatten())
                .zip(g.alpha.iter().chain(g.deltas.iter().flatten())) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
