//! Diverse frame selection for the personalization set.
//!
//! Frames are compared through a pluggable [`DistanceBackend`]; the subset is
//! grown greedily by max-min dispersion. [`brute_force_diverse_subset`] is an
//! exact exhaustive solver for small instances.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::store::{self, Manifest};

/// Default training-set size.
pub const DEFAULT_SUBSET_SIZE: usize = 250;

/// Scans longer than this are decimated by a uniform stride first.
pub const DEFAULT_DECIMATION_THRESHOLD: usize = 2000;

/// Largest number of subsets the exhaustive solver will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetric, nonnegative, zero-diagonal pairwise distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix<T = f64> {
    n: usize,
    d: Vec<T>,
    metric_id: String,
}

impl<T: Scalar> DistanceMatrix<T> {
    /// Validates a row-major `n × n` matrix.
    pub fn new(n: usize, d: Vec<T>, metric_id: impl Into<String>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::InvalidDistanceMatrix(format!(
                "{} entries for n = {n}",
                d.len()
            )));
        }
        for i in 0..n {
            if d[i * n + i] != T::zero() {
                return Err(Error::InvalidDistanceMatrix(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !v.is_finite() || v < T::zero() {
                    return Err(Error::InvalidDistanceMatrix(format!(
                        "entry ({i},{j}) = {v} is negative or non-finite"
                    )));
                }
                if (v - d[j * n + i]).abs().re() > SYMMETRY_TOL {
                    return Err(Error::InvalidDistanceMatrix(format!(
                        "asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            d,
            metric_id: metric_id.into(),
        })
    }

    /// Builds the matrix from a pairwise function evaluated on `i < j`.
    pub fn from_fn(
        n: usize,
        metric_id: impl Into<String>,
        mut f: impl FnMut(usize, usize) -> T,
    ) -> Result<Self> {
        let mut d = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self::new(n, d, metric_id)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn metric_id(&self) -> &str {
        &self.metric_id
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.d[i * self.n + j]
    }

    /// Returns a copy with every distance multiplied by `c`.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            n: self.n,
            d: self.d.iter().map(|v| *v * c).collect(),
            metric_id: self.metric_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelection {
    pub indices: Vec<usize>,
    pub min_pairwise: f64,
    pub avg_pairwise: f64,
}

/// Distance between two frames of equal shape.
pub trait DistanceBackend: Send + Sync {
    fn id(&self) -> &str;
    fn distance(&self, a: &Raster<f64>, b: &Raster<f64>) -> Result<f64>;
}

/// Euclidean distance over all samples.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelL2;

impl DistanceBackend for PixelL2 {
    fn id(&self) -> &str {
        "pixel_l2"
    }

    fn distance(&self, a: &Raster<f64>, b: &Raster<f64>) -> Result<f64> {
        if !a.same_shape(b) {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt())
    }
}

/// Slot for a learned perceptual metric served outside this crate.
#[derive(Clone, Debug)]
pub struct ExternalPerceptual {
    pub name: String,
}

impl DistanceBackend for ExternalPerceptual {
    fn id(&self) -> &str {
        &self.name
    }

    fn distance(&self, _a: &Raster<f64>, _b: &Raster<f64>) -> Result<f64> {
        Err(Error::BackendUnavailable(self.name.clone()))
    }
}

/// Evaluates all unordered pairs concurrently.
pub fn pairwise_distances(
    frames: &[Raster<f64>],
    metric: &dyn DistanceBackend,
) -> Result<DistanceMatrix<f64>> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::TooFewFrames { have: n, need: 2 });
    }
    let shape = frames[0].shape();
    if let Some(bad) = frames.iter().position(|f| f.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "frame {bad} has shape {:?}, expected {shape:?}",
            frames[bad].shape()
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| metric.distance(&frames[i], &frames[j]))
        .collect::<Result<_>>()?;
    let mut d = vec![0.0; n * n];
    for (&(i, j), v) in pairs.iter().zip(values) {
        d[i * n + j] = v;
        d[j * n + i] = v;
    }
    DistanceMatrix::new(n, d, metric.id())
}

/// Exact min and mean over the unordered pairs of `indices`.
pub fn set_diversity<T: Scalar>(dm: &DistanceMatrix<T>, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.len() < 2 {
        return Err(Error::InvalidIndices("need at least two indices".into()));
    }
    let mut seen = vec![false; dm.n];
    for &i in indices {
        if i >= dm.n {
            return Err(Error::InvalidIndices(format!("index {i} out of range {}", dm.n)));
        }
        if seen[i] {
            return Err(Error::InvalidIndices(format!("duplicate index {i}")));
        }
        seen[i] = true;
    }
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, &i) in indices.iter().enumerate() {
        for &j in &indices[a + 1..] {
            let v = dm.get(i, j).re();
            min = min.min(v);
            sum += v;
            count += 1;
        }
    }
    Ok((min, sum / count as f64))
}

fn selection<T: Scalar>(dm: &DistanceMatrix<T>, indices: Vec<usize>) -> Result<SubsetSelection> {
    let (min_pairwise, avg_pairwise) = set_diversity(dm, &indices)?;
    Ok(SubsetSelection {
        indices,
        min_pairwise,
        avg_pairwise,
    })
}

/// Greedy max-min dispersion.
///
/// Starts from the farthest pair (lexicographically smallest on ties), then
/// repeatedly adds the candidate whose distance to its nearest selected
/// element is largest (smallest index on ties).
pub fn greedy_diverse_subset<T: Scalar>(dm: &DistanceMatrix<T>, n: usize) -> Result<SubsetSelection> {
    let total = dm.n;
    if n < 2 || n > total {
        return Err(Error::InvalidCount { n, total });
    }
    let mut best = (0, 1);
    let mut best_d = dm.get(0, 1);
    for i in 0..total {
        for j in i + 1..total {
            if dm.get(i, j) > best_d {
                best_d = dm.get(i, j);
                best = (i, j);
            }
        }
    }
    let mut chosen = vec![best.0, best.1];
    let mut in_set = vec![false; total];
    in_set[best.0] = true;
    in_set[best.1] = true;
    // Distance from each candidate to its nearest selected element.
    let mut nearest: Vec<T> = (0..total)
        .map(|k| dm.get(k, best.0).min(dm.get(k, best.1)))
        .collect();
    while chosen.len() < n {
        let mut pick = None;
        for k in 0..total {
            if in_set[k] {
                continue;
            }
            match pick {
                Some(p) if nearest[k] <= nearest[p] => {}
                _ => pick = Some(k),
            }
        }
        let p = pick.expect("n <= total leaves a candidate");
        in_set[p] = true;
        chosen.push(p);
        for k in 0..total {
            nearest[k] = nearest[k].min(dm.get(k, p));
        }
    }
    selection(dm, chosen)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive max-min dispersion: maximizes the minimum pairwise distance,
/// then the mean, then prefers the lexicographically smallest index set.
pub fn brute_force_diverse_subset<T: Scalar>(
    dm: &DistanceMatrix<T>,
    n: usize,
) -> Result<SubsetSelection> {
    let total = dm.n;
    if n < 2 || n > total {
        return Err(Error::InvalidCount { n, total });
    }
    let combinations = binomial(total, n);
    if combinations > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge {
            combinations,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut current: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    loop {
        let (min, avg) = set_diversity(dm, &current)?;
        // Lexicographic enumeration order makes the first maximum the smallest.
        let better = match &best {
            None => true,
            Some((bm, ba, _)) => min > *bm || (min == *bm && avg > *ba),
        };
        if better {
            best = Some((min, avg, current.clone()));
        }
        // Advance to the next combination.
        let mut i = n;
        loop {
            if i == 0 {
                let (min_pairwise, avg_pairwise, indices) = best.expect("at least one subset");
                return Ok(SubsetSelection {
                    indices,
                    min_pairwise,
                    avg_pairwise,
                });
            }
            i -= 1;
            if current[i] < total - n + i {
                break;
            }
        }
        current[i] += 1;
        for k in i + 1..n {
            current[k] = current[k - 1] + 1;
        }
    }
}

/// Evenly spaced indices, the non-diverse baseline.
pub fn evenly_spaced_subset(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::InvalidCount { n, total });
    }
    Ok((0..n).map(|i| i * total / n).collect())
}

/// Stride that brings `total` frames under `threshold`.
pub fn decimation_stride(total: usize, threshold: usize) -> usize {
    if total <= threshold || threshold == 0 {
        1
    } else {
        total.div_ceil(threshold)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistanceMeta {
    n: usize,
    metric_id: String,
    layout: String,
}

/// Persists the strict upper triangle, row-major, as float32.
pub fn save_distance_matrix(dir: &Path, dm: &DistanceMatrix<f64>) -> Result<()> {
    let n = dm.n;
    let tri = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
    let blob = store::write_blob(
        dir,
        "distances",
        tri.map(|(i, j)| dm.get(i, j)),
        vec![n * (n - 1) / 2],
    )?;
    let mut manifest = Manifest::new(
        "distance_matrix",
        DistanceMeta {
            n,
            metric_id: dm.metric_id.clone(),
            layout: "upper_triangle_row_major".into(),
        },
    );
    manifest.blobs.insert("upper_triangle".into(), blob);
    store::write_json(&dir.join("distances.json"), &manifest)
}

pub fn load_distance_matrix(dir: &Path) -> Result<DistanceMatrix<f64>> {
    let path = dir.join("distances.json");
    let manifest: Manifest<DistanceMeta> = store::read_manifest(&path, "distance_matrix")?;
    let values = store::read_blob_f64(dir, manifest.blob("upper_triangle", &path)?)?;
    let n = manifest.meta.n;
    if values.len() != n * n.saturating_sub(1) / 2 {
        return Err(Error::format(&path, "triangle length does not match n"));
    }
    let mut it = values.into_iter();
    DistanceMatrix::from_fn(n, manifest.meta.metric_id, |_, _| it.next().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(points: &[f64]) -> DistanceMatrix<f64> {
        DistanceMatrix::from_fn(points.len(), "abs", |i, j| (points[i] - points[j]).abs()).unwrap()
    }

    #[test]
    fn greedy_trace_on_line() {
        let sel = greedy_diverse_subset(&line(&[0.0, 1.0, 2.0, 10.0]), 3).unwrap();
        assert_eq!(sel.indices, vec![0, 3, 2]);
        assert_eq!(sel.min_pairwise, 2.0);
    }

    #[test]
    fn brute_force_on_line() {
        let sel = brute_force_diverse_subset(&line(&[0.0, 1.0, 2.0, 10.0]), 3).unwrap();
        assert_eq!(sel.indices, vec![0, 2, 3]);
        assert_eq!(sel.min_pairwise, 2.0);
    }

    #[test]
    fn full_set_selected_when_n_equals_total() {
        let dm = line(&[0.0, 4.0, 5.0, 9.0, 1.5]);
        let mut g = greedy_diverse_subset(&dm, 5).unwrap().indices;
        g.sort();
        assert_eq!(g, vec![0, 1, 2, 3, 4]);
        assert_eq!(brute_force_diverse_subset(&dm, 5).unwrap().indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn n_two_gives_farthest_pair() {
        let dm = line(&[3.0, -1.0, 7.5, 2.0]);
        assert_eq!(greedy_diverse_subset(&dm, 2).unwrap().indices, vec![1, 2]);
        assert_eq!(brute_force_diverse_subset(&dm, 2).unwrap().indices, vec![1, 2]);
    }

    #[test]
    fn ties_break_to_smallest_indices() {
        // Square corners: every side 1, both diagonals equal.
        let pts: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let dm = DistanceMatrix::from_fn(4, "euclid", |i, j| -> f64 {
            let (a, b) = (pts[i], pts[j]);
            ((a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1)).sqrt()
        })
        .unwrap();
        assert_eq!(greedy_diverse_subset(&dm, 3).unwrap().indices, vec![0, 2, 1]);
    }

    #[test]
    fn invalid_counts() {
        let dm = line(&[0.0, 1.0, 2.0]);
        assert!(matches!(greedy_diverse_subset(&dm, 1), Err(Error::InvalidCount { .. })));
        assert!(matches!(greedy_diverse_subset(&dm, 4), Err(Error::InvalidCount { .. })));
        assert!(matches!(brute_force_diverse_subset(&dm, 0), Err(Error::InvalidCount { .. })));
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let pts: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert!(matches!(
            brute_force_diverse_subset(&line(&pts), 20),
            Err(Error::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn diversity_of_pair_and_triple() {
        let dm = line(&[0.0, 2.0, 10.0]);
        assert_eq!(set_diversity(&dm, &[0, 2]).unwrap(), (10.0, 10.0));
        let (min, avg) = set_diversity(&dm, &[0, 1, 2]).unwrap();
        assert_eq!(min, 2.0);
        assert!((avg - 20.0 / 3.0).abs() < 1e-12);
        assert!(matches!(set_diversity(&dm, &[1, 1]), Err(Error::InvalidIndices(_))));
        assert!(matches!(set_diversity(&dm, &[0, 3]), Err(Error::InvalidIndices(_))));
    }

    #[test]
    fn matrix_validation() {
        assert!(DistanceMatrix::new(2, vec![0.0, 1.0, 2.0, 0.0], "x").is_err());
        assert!(DistanceMatrix::new(2, vec![0.0, -1.0, -1.0, 0.0], "x").is_err());
        assert!(DistanceMatrix::new(2, vec![1.0, 1.0, 1.0, 0.0], "x").is_err());
    }

    #[test]
    fn pixel_l2_distances() {
        let zeros = Raster::filled(2, 2, 1, 0.0);
        let ones = Raster::filled(2, 2, 1, 1.0);
        let dm = pairwise_distances(&[zeros.clone(), zeros.clone(), ones], &PixelL2).unwrap();
        assert_eq!(dm.get(0, 1), 0.0);
        assert!((dm.get(0, 2) - 2.0).abs() < 1e-15);
        assert_eq!(dm.metric_id(), "pixel_l2");
    }

    #[test]
    fn random_frames_give_valid_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Raster<f64>> = (0..5)
            .map(|_| Raster::new(4, 3, 3, (0..36).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let dm = pairwise_distances(&frames, &PixelL2).unwrap();
        for i in 0..5 {
            assert_eq!(dm.get(i, i), 0.0);
            for j in 0..5 {
                assert_eq!(dm.get(i, j), dm.get(j, i));
            }
        }
    }

    #[test]
    fn mismatched_frames_and_missing_backend() {
        let a = Raster::filled(2, 2, 1, 0.0);
        let b = Raster::filled(3, 2, 1, 0.0);
        assert!(matches!(pairwise_distances(&[a.clone(), b], &PixelL2), Err(Error::ShapeMismatch(_))));
        let ext = ExternalPerceptual { name: "lpips".into() };
        assert!(matches!(
            pairwise_distances(&[a.clone(), a], &ext),
            Err(Error::BackendUnavailable(_))
        ));
    }

    #[test]
    fn evenly_spaced_and_stride() {
        assert_eq!(evenly_spaced_subset(10, 5).unwrap(), vec![0, 2, 4, 6, 8]);
        assert_eq!(decimation_stride(1500, 2000), 1);
        assert_eq!(decimation_stride(4001, 2000), 3);
    }

    #[test]
    fn matrix_persists_as_triangle() {
        let dir = tempfile::tempdir().unwrap();
        let dm = line(&[0.0, 1.25, 3.5, -2.0]);
        save_distance_matrix(dir.path(), &dm).unwrap();
        let back = load_distance_matrix(dir.path()).unwrap();
        assert_eq!(back, dm);
    }

    fn arb_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((0.0..10.0f64, 0.0..10.0f64), 3..10)
    }

    fn euclid(points: &[(f64, f64)]) -> DistanceMatrix<f64> {
        DistanceMatrix::from_fn(points.len(), "euclid", |i, j| {
            let (a, b) = (points[i], points[j]);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn greedy_min_is_nonincreasing_in_n(points in arb_points()) {
            let dm = euclid(&points);
            let mut last = f64::INFINITY;
            for n in 2..=dm.n() {
                let s = greedy_diverse_subset(&dm, n).unwrap();
                prop_assert!(s.min_pairwise <= last);
                last = s.min_pairwise;
            }
        }

        #[test]
        fn selection_invariant_under_scaling(points in arb_points(), c in 0.01..100.0f64) {
            let dm = euclid(&points);
            let n = dm.n() / 2 + 1;
            prop_assert_eq!(
                greedy_diverse_subset(&dm, n).unwrap().indices,
                greedy_diverse_subset(&dm.scaled(c), n).unwrap().indices
            );
        }

        #[test]
        fn greedy_is_half_optimal(points in arb_points()) {
            let dm = euclid(&points);
            for n in 2..=dm.n().min(5) {
                let g = greedy_diverse_subset(&dm, n).unwrap();
                let b = brute_force_diverse_subset(&dm, n).unwrap();
                prop_assert!(g.min_pairwise >= 0.5 * b.min_pairwise - 1e-12);
                prop_assert!(b.min_pairwise >= g.min_pairwise);
            }
        }
    }
}
