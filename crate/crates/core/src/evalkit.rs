//! Evaluation: identity score against the training set, pose and expression
//! distances against the driving video, and the run report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::toy::ToyParam;
use crate::raster::Raster;
use crate::store;

/// Default number of nearest training embeddings averaged per frame.
pub const DEFAULT_TOP_K: usize = 5;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const UNIT_TOL: f64 = 1e-6;

/// Unit-norm feature vectors, one per image.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    vectors: Vec<Vec<f64>>,
    backend_id: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>, backend_id: impl Into<String>) -> Result<Self> {
        if let Some(first) = vectors.first() {
            if let Some(i) = vectors.iter().position(|v| v.len() != first.len()) {
                return Err(Error::DimensionMismatch(format!(
                    "embedding {i} has length {}, expected {}",
                    vectors[i].len(),
                    first.len()
                )));
            }
        }
        for (i, v) in vectors.iter().enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::InvalidParameter(format!("embedding {i} has norm {norm}")));
            }
        }
        Ok(Self {
            vectors,
            backend_id: backend_id.into(),
        })
    }

    /// Scales each vector to unit length.
    pub fn normalized(vectors: Vec<Vec<f64>>, backend_id: impl Into<String>) -> Result<Self> {
        let vectors = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(Error::InvalidParameter(format!("embedding {i} has norm {norm}")));
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            })
            .collect::<Result<_>>()?;
        Self::new(vectors, backend_id)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per generated frame, the mean cosine similarity to its `k` most similar
/// training embeddings.
pub fn id_similarities(generated: &EmbeddingSet, train: &EmbeddingSet, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter("top-k must be positive".into()));
    }
    if train.len() < k {
        return Err(Error::TooFewTrainImages { have: train.len(), need: k });
    }
    if let (Some(g), Some(t)) = (generated.vectors.first(), train.vectors.first()) {
        if g.len() != t.len() {
            return Err(Error::DimensionMismatch(format!(
                "generated embeddings have length {}, training embeddings {}",
                g.len(),
                t.len()
            )));
        }
    }
    Ok(generated
        .vectors
        .par_iter()
        .map(|g| {
            let mut sims: Vec<f64> = train.vectors.iter().map(|t| dot(g, t)).collect();
            sims.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
            let top = &mut sims[..k];
            top.sort_unstable_by(|a, b| b.total_cmp(a));
            top.iter().sum::<f64>() / k as f64
        })
        .collect())
}

/// Mean over generated frames of [`id_similarities`].
pub fn id_score(generated: &EmbeddingSet, train: &EmbeddingSet, k: usize) -> Result<f64> {
    let sims = id_similarities(generated, train, k)?;
    if sims.is_empty() {
        return Err(Error::EmptyInput("no generated embeddings".into()));
    }
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Maps a frame to an identity feature vector.
pub trait FaceEmbedder: Send + Sync {
    fn id(&self) -> &str;
    /// Unnormalized features; [`embed_frames`] scales them to unit length.
    fn features(&self, frame: &Raster<f64>) -> Result<Vec<f64>>;
}

/// Toy appearance features: 8×8 block means per channel, mean-centered.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyEmbedder;

const TOY_GRID: usize = 8;

impl FaceEmbedder for ToyEmbedder {
    fn id(&self) -> &str {
        "toy_blocks"
    }

    fn features(&self, frame: &Raster<f64>) -> Result<Vec<f64>> {
        let (w, h, c) = frame.shape();
        let mut sums = vec![0.0; TOY_GRID * TOY_GRID * c];
        let mut counts = vec![0usize; TOY_GRID * TOY_GRID];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * TOY_GRID / h) * TOY_GRID + x * TOY_GRID / w;
                counts[cell] += 1;
                for (k, v) in frame.pixel(x, y).iter().enumerate() {
                    sums[cell * c + k] += v;
                }
            }
        }
        let mut f: Vec<f64> = sums
            .iter()
            .enumerate()
            .map(|(i, s)| s / counts[i / c].max(1) as f64)
            .collect();
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        for v in &mut f {
            *v -= mean;
        }
        Ok(f)
    }
}

/// Slot for a face-recognition network served outside this crate.
#[derive(Clone, Debug)]
pub struct ExternalEmbedder {
    pub name: String,
}

impl FaceEmbedder for ExternalEmbedder {
    fn id(&self) -> &str {
        &self.name
    }

    fn features(&self, _frame: &Raster<f64>) -> Result<Vec<f64>> {
        Err(Error::BackendUnavailable(self.name.clone()))
    }
}

pub fn embed_frames(frames: &[Raster<f64>], embedder: &dyn FaceEmbedder) -> Result<EmbeddingSet> {
    let features = frames
        .par_iter()
        .map(|f| embedder.features(f))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::normalized(features, embedder.id())
}

/// Pose and expression features of one frame.
pub trait PoseExpressionBackend: Send + Sync {
    fn id(&self) -> &str;
    fn features(&self, frame: &Raster<f64>) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Toy parameters as rendered, split into pose (center, scale, yaw) and
/// expression (eyes, irises, mouth).
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyFeatures;

impl PoseExpressionBackend for ToyFeatures {
    fn id(&self) -> &str {
        "toy_params"
    }

    fn features(&self, frame: &Raster<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let face = frame
            .annotation
            .as_ref()
            .ok_or(Error::NoFaceDetected { frame: None })?;
        let p = face.apparent_params((frame.width(), frame.height()));
        Ok((
            ToyParam::POSE.iter().map(|q| p.get(*q)).collect(),
            ToyParam::EXPRESSION.iter().map(|q| p.get(*q)).collect(),
        ))
    }
}

/// Slot for a 3D face reconstruction model served outside this crate.
#[derive(Clone, Debug)]
pub struct ExternalFeatures {
    pub name: String,
}

impl PoseExpressionBackend for ExternalFeatures {
    fn id(&self) -> &str {
        &self.name
    }

    fn features(&self, _frame: &Raster<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        Err(Error::BackendUnavailable(self.name.clone()))
    }
}

fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Per-frame `(pose, expression)` mean squared feature errors.
pub fn pose_expression_series(
    generated: &[Raster<f64>],
    driving: &[Raster<f64>],
    backend: &dyn PoseExpressionBackend,
) -> Result<Vec<(f64, f64)>> {
    if generated.len() != driving.len() {
        return Err(Error::LengthMismatch(generated.len(), driving.len()));
    }
    generated
        .par_iter()
        .zip(driving)
        .enumerate()
        .map(|(t, (g, d))| {
            let tag = |e: Error| match e {
                Error::NoFaceDetected { .. } => Error::NoFaceDetected { frame: Some(t) },
                other => other,
            };
            let (gp, ge) = backend.features(g).map_err(tag)?;
            let (dp, de) = backend.features(d).map_err(tag)?;
            Ok((mse(&gp, &dp)?, mse(&ge, &de)?))
        })
        .collect()
}

/// `(APD, AED)`: frame means of the pose and expression errors.
pub fn pose_expression_distance(
    generated: &[Raster<f64>],
    driving: &[Raster<f64>],
    backend: &dyn PoseExpressionBackend,
) -> Result<(f64, f64)> {
    let series = pose_expression_series(generated, driving, backend)?;
    if series.is_empty() {
        return Err(Error::EmptyInput("no frames to compare".into()));
    }
    let n = series.len() as f64;
    Ok((
        series.iter().map(|s| s.0).sum::<f64>() / n,
        series.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub id_sim: f64,
    pub pose_dist: f64,
    pub expr_dist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub id_score: f64,
    pub apd: f64,
    pub aed: f64,
    /// Reserved for a no-reference quality score computed elsewhere.
    pub niqe: Option<f64>,
    pub top_k: usize,
    pub embedder: String,
    pub features: String,
    pub frames: Vec<FrameMetrics>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Header `frame_index,id_sim,pose_dist,expr_dist`, one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,id_sim,pose_dist,expr_dist\n");
        for f in &self.frames {
            let _ = writeln!(out, "{},{},{},{}", f.frame_index, f.id_sim, f.pose_dist, f.expr_dist);
        }
        out
    }
}

/// Artifacts a report is computed from.
#[derive(Clone, Debug)]
pub struct ReportInputs {
    pub generated: PathBuf,
    pub driving: PathBuf,
    pub training: PathBuf,
    /// Trajectory manifest of the generated frames.
    pub trajectory: PathBuf,
}

/// Where [`make_report`] writes.
#[derive(Clone, Debug)]
pub struct ReportOutputs {
    pub json: PathBuf,
    pub csv: PathBuf,
}

/// Computes all metrics from persisted artifacts and writes the JSON report
/// and per-frame CSV.
pub fn make_report(
    inputs: &ReportInputs,
    outputs: &ReportOutputs,
    embedder: &dyn FaceEmbedder,
    features: &dyn PoseExpressionBackend,
    top_k: usize,
    config: &impl Serialize,
) -> Result<EvalReport> {
    for p in [&inputs.generated, &inputs.driving, &inputs.training] {
        let side = crate::pipeline::sidecar_path(p);
        if !side.exists() {
            return Err(Error::MissingArtifact(side));
        }
    }
    if !inputs.trajectory.exists() {
        return Err(Error::MissingArtifact(inputs.trajectory.clone()));
    }
    let traj_frames = trajectory_length(&inputs.trajectory)?;
    let generated = crate::pipeline::read_video(&inputs.generated)?.frames;
    let driving = crate::pipeline::read_video(&inputs.driving)?.frames;
    let training = crate::pipeline::read_video(&inputs.training)?.frames;
    if traj_frames != generated.len() {
        return Err(Error::LengthMismatch(traj_frames, generated.len()));
    }

    let gen_emb = embed_frames(&generated, embedder)?;
    let train_emb = embed_frames(&training, embedder)?;
    let sims = id_similarities(&gen_emb, &train_emb, top_k)?;
    let dists = pose_expression_series(&generated, &driving, features)?;
    let frames: Vec<FrameMetrics> = sims
        .iter()
        .zip(&dists)
        .enumerate()
        .map(|(t, (s, (p, e)))| FrameMetrics {
            frame_index: t,
            id_sim: *s,
            pose_dist: *p,
            expr_dist: *e,
        })
        .collect();
    if frames.is_empty() {
        return Err(Error::EmptyInput("no generated frames".into()));
    }
    let n = frames.len() as f64;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        id_score: frames.iter().map(|f| f.id_sim).sum::<f64>() / n,
        apd: frames.iter().map(|f| f.pose_dist).sum::<f64>() / n,
        aed: frames.iter().map(|f| f.expr_dist).sum::<f64>() / n,
        niqe: None,
        top_k,
        embedder: embedder.id().into(),
        features: features.id().into(),
        frames,
        config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
    };
    store::write_json(&outputs.json, &report)?;
    if let Some(parent) = outputs.csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        store::ensure_dir(parent)?;
    }
    std::fs::write(&outputs.csv, report.to_csv()).map_err(|e| Error::io(&outputs.csv, e))?;
    Ok(report)
}

fn trajectory_length(path: &Path) -> Result<usize> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let name = path
        .file_stem()
        .ok_or_else(|| Error::format(path, "no trajectory name"))?
        .to_string_lossy();
    Ok(crate::reenact::load_trajectory(dir, &name)?.len())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let report: EvalReport = store::read_json(path)?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported schema_version {}", report.schema_version),
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genbackend::toy::ToyFaceParams;
    use crate::genbackend::ToyGenerator;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_set(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> EmbeddingSet {
        let v = (0..count)
            .map(|_| unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        EmbeddingSet::new(v, "rand").unwrap()
    }

    fn brute_force(generated: &EmbeddingSet, train: &EmbeddingSet, k: usize) -> f64 {
        let per: Vec<f64> = generated
            .vectors()
            .iter()
            .map(|g| {
                let mut s: Vec<f64> = train.vectors().iter().map(|t| dot(g, t)).collect();
                s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                s[..k].iter().sum::<f64>() / k as f64
            })
            .collect();
        per.iter().sum::<f64>() / per.len() as f64
    }

    #[test]
    fn non_unit_vectors_rejected() {
        assert!(EmbeddingSet::new(vec![vec![1.0, 1.0]], "x").is_err());
        assert!(EmbeddingSet::new(vec![vec![1.0], vec![0.0, 1.0]], "x").is_err());
    }

    #[test]
    fn five_duplicates_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_set(&mut rng, 6, 16);
        let train = EmbeddingSet::new(
            g.vectors().iter().flat_map(|v| std::iter::repeat_n(v.clone(), 5)).collect(),
            "rand",
        )
        .unwrap();
        assert!((id_score(&g, &train, 5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_sets_score_zero() {
        let e = |i: usize| (0..10).map(|j| f64::from(u8::from(i == j))).collect::<Vec<_>>();
        let g = EmbeddingSet::new(vec![e(0), e(1)], "basis").unwrap();
        let t = EmbeddingSet::new((2..10).map(e).collect(), "basis").unwrap();
        assert_eq!(id_score(&g, &t, 5).unwrap(), 0.0);
    }

    #[test]
    fn too_few_training_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_set(&mut rng, 2, 4);
        let t = random_set(&mut rng, 4, 4);
        assert!(matches!(id_score(&g, &t, 5), Err(Error::TooFewTrainImages { have: 4, need: 5 })));
    }

    #[test]
    fn matches_brute_force_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let g = random_set(&mut rng, 7, 12);
            let t = random_set(&mut rng, 20, 12);
            assert!((id_score(&g, &t, 5).unwrap() - brute_force(&g, &t, 5)).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn permutation_invariant(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_set(&mut rng, 5, 6);
            let t = random_set(&mut rng, 9, 6);
            let base = id_score(&g, &t, 5).unwrap();
            let mut gv = g.vectors().to_vec();
            let mut tv = t.vectors().to_vec();
            gv.reverse();
            tv.rotate_left(seed as usize % 9);
            tv.swap(0, 8);
            let permuted = id_score(&EmbeddingSet::new(gv, "r").unwrap(), &EmbeddingSet::new(tv, "r").unwrap(), 5).unwrap();
            prop_assert!((base - permuted).abs() < 1e-12);
        }

        #[test]
        fn copying_a_generated_vector_never_lowers_score(seed in 0u64..100_000, slot in 0usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_set(&mut rng, 4, 6);
            let t = random_set(&mut rng, 9, 6);
            let j = seed as usize % 4;
            // Other frames must not rely on the replaced slot.
            let in_top_k = |v: &[f64]| {
                let s = dot(v, &t.vectors()[slot]);
                t.vectors().iter().filter(|u| dot(v, u) > s).count() < 5
            };
            prop_assume!(g.vectors().iter().enumerate().all(|(i, v)| i == j || !in_top_k(v)));
            let before = id_score(&g, &t, 5).unwrap();
            let mut tv = t.vectors().to_vec();
            tv[slot] = g.vectors()[j].clone();
            let after = id_score(&g, &EmbeddingSet::new(tv, "r").unwrap(), 5).unwrap();
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn copying_never_lowers_a_single_frame_score(seed in 0u64..100_000, slot in 0usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_set(&mut rng, 1, 6);
            let t = random_set(&mut rng, 9, 6);
            let before = id_score(&g, &t, 5).unwrap();
            let mut tv = t.vectors().to_vec();
            tv[slot] = g.vectors()[0].clone();
            let after = id_score(&g, &EmbeddingSet::new(tv, "r").unwrap(), 5).unwrap();
            prop_assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn copying_can_lower_another_frames_score() {
        let e = |x: f64, y: f64| unit(vec![x, y]);
        let g = EmbeddingSet::new(vec![e(1.0, 0.0), e(0.0, 1.0)], "r").unwrap();
        let t2 = EmbeddingSet::new(vec![e(0.2, 1.0), e(1.0, 0.0)], "r").unwrap();
        let worse = EmbeddingSet::new(vec![e(1.0, 0.0), e(1.0, 0.0)], "r").unwrap();
        assert!(id_score(&g, &worse, 1).unwrap() < id_score(&g, &t2, 1).unwrap());
    }

    fn toy_clip(mouth: &[f64]) -> Vec<Raster<f64>> {
        let g = ToyGenerator::default();
        mouth
            .iter()
            .map(|m| g.render_params(&ToyFaceParams::midpoint().with(ToyParam::MouthOpen, *m)))
            .collect()
    }

    #[test]
    fn identical_sequences_have_zero_distance() {
        let clip = toy_clip(&[0.1, 0.5, 0.9]);
        assert_eq!(pose_expression_distance(&clip, &clip, &ToyFeatures).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn mouth_only_differences_are_expression() {
        let (apd, aed) = pose_expression_distance(&toy_clip(&[0.1, 0.2]), &toy_clip(&[0.6, 0.2]), &ToyFeatures).unwrap();
        assert_eq!(apd, 0.0);
        assert!((aed - 0.5 * 0.25 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn random_pairs_match_direct_recomputation() {
        let g = ToyGenerator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<ToyFaceParams<f64>> = (0..5).map(|_| crate::synth::random_params(&mut rng, 1.0)).collect();
        let b: Vec<ToyFaceParams<f64>> = (0..5).map(|_| crate::synth::random_params(&mut rng, 1.0)).collect();
        let ra: Vec<_> = a.iter().map(|p| g.render_params(p)).collect();
        let rb: Vec<_> = b.iter().map(|p| g.render_params(p)).collect();
        let (apd, aed) = pose_expression_distance(&ra, &rb, &ToyFeatures).unwrap();
        let group = |qs: &[ToyParam]| {
            a.iter()
                .zip(&b)
                .map(|(x, y)| qs.iter().map(|q| (x.get(*q) - y.get(*q)).powi(2)).sum::<f64>() / qs.len() as f64)
                .sum::<f64>()
                / 5.0
        };
        assert!((apd - group(&ToyParam::POSE)).abs() < 1e-15);
        assert!((aed - group(&ToyParam::EXPRESSION)).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_and_unavailable_backend() {
        let clip = toy_clip(&[0.1, 0.5]);
        assert!(matches!(
            pose_expression_distance(&clip, &clip[..1], &ToyFeatures),
            Err(Error::LengthMismatch(2, 1))
        ));
        let ext = ExternalFeatures { name: "deca".into() };
        assert!(matches!(pose_expression_distance(&clip, &clip, &ext), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn toy_embedding_is_unit_norm() {
        let set = embed_frames(&toy_clip(&[0.0, 1.0]), &ToyEmbedder).unwrap();
        for v in set.vectors() {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_has_expected_columns() {
        let report = EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            id_score: 1.0,
            apd: 0.0,
            aed: 0.5,
            niqe: None,
            top_k: 5,
            embedder: "e".into(),
            features: "f".into(),
            frames: vec![FrameMetrics { frame_index: 0, id_sim: 1.0, pose_dist: 0.0, expr_dist: 0.5 }],
            config: serde_json::Value::Null,
        };
        assert_eq!(report.to_csv(), "frame_index,id_sim,pose_dist,expr_dist\n0,1,0,0.5\n");
    }
}
