//! Conditioning strategies and the frozen image embedder used in place of a
//! pretrained image encoder.
//!
//! The embedder is a fixed seeded map: downsample to 16x16, flatten, project
//! onto `dim` orthonormal directions, squash with `tanh` and optionally
//! L2-normalize. An "identity" mode blanks everything outside a central face
//! window first, so it is stable on frontal views and unstable on back views.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::LABEL_DIM;
use crate::error::{Error, Result};
use crate::raster::{resize_square, Image, BACKGROUND};
use crate::synthdata::MultiViewRecord;

/// Side length the embedder resamples every image to.
pub const EMBED_GRID: usize = 16;
const EMBED_INPUT: usize = EMBED_GRID * EMBED_GRID * 3;
const EMBED_GAIN: f64 = 2.0;

/// Default embedding width.
pub const DEFAULT_EMBED_DIM: usize = 512;
pub const DEFAULT_EMBED_SEED: u64 = 0x5e3a_11c0;

/// A fixed-length view-invariant condition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCondition {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl SemanticCondition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_distance(&self, other: &SemanticCondition) -> f64 {
        l2(&self.values, &other.values)
    }
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    /// Whole-image embedding.
    Semantic,
    /// Embedding restricted to the central face window.
    Identity,
}

/// Frozen, seeded image embedder.
#[derive(Debug, Clone)]
pub struct ConditionEmbedder {
    seed: u64,
    dim: usize,
    normalize: bool,
    /// `dim` x 768 projection with orthonormal rows, row-major.
    projection: Vec<f64>,
}

impl ConditionEmbedder {
    pub fn new(seed: u64, dim: usize, normalize: bool) -> Result<Self> {
        if dim == 0 || dim > EMBED_INPUT {
            return Err(Error::invalid(format!(
                "embedding dimension must be in 1..={EMBED_INPUT}, got {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = DMatrix::<f64>::from_fn(EMBED_INPUT, dim, |_, _| {
            StandardNormal.sample(&mut rng)
        });
        let q = gauss.qr().q();
        let mut projection = Vec::with_capacity(dim * EMBED_INPUT);
        for row in 0..dim {
            projection.extend(q.column(row).iter().copied());
        }
        Ok(Self {
            seed,
            dim,
            normalize,
            projection,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn embed(&self, image: &Image) -> Result<SemanticCondition> {
        self.embed_mode(image, EmbedMode::Semantic)
    }

    pub fn embed_identity(&self, image: &Image) -> Result<SemanticCondition> {
        self.embed_mode(image, EmbedMode::Identity)
    }

    pub fn embed_mode(&self, image: &Image, mode: EmbedMode) -> Result<SemanticCondition> {
        let small = resize_square(image, EMBED_GRID)?;
        let mut input = Vec::with_capacity(EMBED_INPUT);
        for ((y, x, c), &v) in small.indexed_iter() {
            let v = match mode {
                EmbedMode::Identity if !in_face_window(y, x) => BACKGROUND[c],
                _ => v,
            };
            input.push(v as f64 - 0.5);
        }
        let mut values: Vec<f64> = self
            .projection
            .chunks_exact(EMBED_INPUT)
            .map(|row| {
                let dot: f64 = row.iter().zip(&input).map(|(a, b)| a * b).sum();
                (EMBED_GAIN * dot).tanh()
            })
            .collect();
        if self.normalize {
            let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                values.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(SemanticCondition {
            values,
            normalized: self.normalize,
        })
    }
}

fn in_face_window(y: usize, x: usize) -> bool {
    let g = EMBED_GRID as f64;
    let u = (x as f64 + 0.5) / g - 0.5;
    let v = (y as f64 + 0.5) / g - 0.53;
    (u / 0.2).powi(2) + (v / 0.24).powi(2) <= 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Unconditional,
    /// Camera label of the current view.
    View,
    /// Embedding of the current view image.
    ViewSemantic,
    /// Embedding of the subject's front view, shared by every view.
    SemanticFront,
    /// Identity-mode embedding of the current view.
    IdentityCurrent,
    /// Identity-mode embedding of the front view.
    IdentityFront,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Unconditional,
        StrategyKind::View,
        StrategyKind::ViewSemantic,
        StrategyKind::SemanticFront,
        StrategyKind::IdentityCurrent,
        StrategyKind::IdentityFront,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Unconditional => "unconditional",
            StrategyKind::View => "view",
            StrategyKind::ViewSemantic => "view_semantic",
            StrategyKind::SemanticFront => "semantic_front",
            StrategyKind::IdentityCurrent => "identity_current",
            StrategyKind::IdentityFront => "identity_front",
        }
    }

    /// Whether the condition depends on which view of a record is used.
    pub fn is_view_dependent(&self) -> bool {
        matches!(
            self,
            StrategyKind::View | StrategyKind::ViewSemantic | StrategyKind::IdentityCurrent
        )
    }

    /// Whether the condition is an image embedding (as opposed to a camera
    /// label or nothing).
    pub fn is_semantic(&self) -> bool {
        !matches!(self, StrategyKind::Unconditional | StrategyKind::View)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "semantic" && *k == StrategyKind::SemanticFront))
            .ok_or_else(|| Error::invalid(format!("unknown conditioning strategy '{s}'")))
    }
}

/// A strategy together with the condition width it produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionStrategy {
    pub kind: StrategyKind,
    pub dimension: usize,
}

impl ConditionStrategy {
    pub fn new(kind: StrategyKind, embed_dim: usize) -> Self {
        let dimension = match kind {
            StrategyKind::Unconditional => 0,
            StrategyKind::View => LABEL_DIM,
            _ => embed_dim,
        };
        Self { kind, dimension }
    }

    /// Checks a claimed (kind, dimension) pair.
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        let expected = Self::new(self.kind, embed_dim).dimension;
        if expected != self.dimension {
            return Err(Error::invalid(format!(
                "strategy {} needs dimension {expected}, got {}",
                self.kind, self.dimension
            )));
        }
        Ok(())
    }
}

/// The generator conditioning vector for one view of a record.
pub fn condition_for(
    strategy: StrategyKind,
    record: &MultiViewRecord,
    view_index: usize,
    embedder: &ConditionEmbedder,
) -> Result<Vec<f64>> {
    let view = record.views.get(view_index).ok_or_else(|| {
        Error::invalid(format!(
            "view {view_index} out of range for subject {} ({} views)",
            record.subject_id,
            record.views.len()
        ))
    })?;
    Ok(match strategy {
        StrategyKind::Unconditional => Vec::new(),
        StrategyKind::View => view.camera.0.to_vec(),
        StrategyKind::ViewSemantic => embedder.embed(&view.image)?.values,
        StrategyKind::SemanticFront => record.condition.values.clone(),
        StrategyKind::IdentityCurrent => embedder.embed_identity(&view.image)?.values,
        StrategyKind::IdentityFront => {
            embedder.embed_identity(&record.front_view()?.image)?.values
        }
    })
}

/// Mean over records of `1 - within-record variance / dataset variance`,
/// clamped to [0, 1]. Strategies with no variation anywhere score 1.
pub fn view_invariance_score(
    strategy: StrategyKind,
    records: &[MultiViewRecord],
    embedder: &ConditionEmbedder,
) -> Result<f64> {
    let mut per_record = Vec::with_capacity(records.len());
    for rec in records {
        if rec.views.len() < 2 {
            return Err(Error::invalid(format!(
                "subject {} has fewer than two views",
                rec.subject_id
            )));
        }
        let vecs = (0..rec.views.len())
            .map(|i| condition_for(strategy, rec, i, embedder))
            .collect::<Result<Vec<_>>>()?;
        per_record.push(vecs);
    }
    let all: Vec<&Vec<f64>> = per_record.iter().flatten().collect();
    let total = spread(&all);
    if total == 0.0 {
        return Ok(1.0);
    }
    let mean_score = per_record
        .iter()
        .map(|vecs| {
            let within = spread(&vecs.iter().collect::<Vec<_>>());
            (1.0 - within / total).clamp(0.0, 1.0)
        })
        .sum::<f64>()
        / per_record.len() as f64;
    Ok(mean_score)
}

/// Mean squared distance to the centroid.
fn spread(vecs: &[&Vec<f64>]) -> f64 {
    let Some(first) = vecs.first() else {
        return 0.0;
    };
    let d = first.len();
    if d == 0 {
        return 0.0;
    }
    let mut mean = vec![0.0; d];
    for v in vecs {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    let n = vecs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    vecs.iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::PoseDistribution;
    use crate::synthdata::{build_record, generate_subject, render_ground_truth, RecordConfig};
    use crate::camera::CameraPose;

    fn embedder() -> ConditionEmbedder {
        ConditionEmbedder::new(11, 32, true).unwrap()
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        let e = embedder();
        for i in 0..e.dim {
            for j in 0..e.dim {
                let a = &e.projection[i * EMBED_INPUT..(i + 1) * EMBED_INPUT];
                let b = &e.projection[j * EMBED_INPUT..(j + 1) * EMBED_INPUT];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embedding_is_deterministic_and_normalized() {
        let e = embedder();
        let spec = generate_subject(4);
        let (img, _) = render_ground_truth(&spec, &CameraPose::front(), 32, 0.0, 0).unwrap();
        let a = e.embed(&img).unwrap();
        let b = e.embed(&img).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        let again = ConditionEmbedder::new(11, 32, true).unwrap().embed(&img).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn small_perturbation_moves_embedding_little() {
        let e = embedder();
        let spec = generate_subject(5);
        let (img, _) = render_ground_truth(&spec, &CameraPose::front(), 32, 0.0, 0).unwrap();
        let noisy = Image::from_shape_fn(img.dim(), |(y, x, c)| {
            img[(y, x, c)] + if (y + 3 * x + c) % 2 == 0 { 1e-4 } else { -1e-4 }
        });
        let d = e.embed(&img).unwrap().l2_distance(&e.embed(&noisy).unwrap());
        assert!(d < 1e-2, "embedding moved by {d}");
    }

    #[test]
    fn rejects_wrong_shape() {
        let e = embedder();
        assert!(e.embed(&Image::zeros((8, 9, 3))).is_err());
        assert!(e.embed(&Image::zeros((8, 8, 1))).is_err());
    }

    #[test]
    fn strategy_dimensions() {
        assert_eq!(ConditionStrategy::new(StrategyKind::Unconditional, 512).dimension, 0);
        assert_eq!(ConditionStrategy::new(StrategyKind::View, 512).dimension, 25);
        assert_eq!(ConditionStrategy::new(StrategyKind::SemanticFront, 512).dimension, 512);
        let bad = ConditionStrategy {
            kind: StrategyKind::View,
            dimension: 512,
        };
        assert!(bad.validate(512).is_err());
        assert_eq!("semantic".parse::<StrategyKind>().unwrap(), StrategyKind::SemanticFront);
        assert_eq!("view-semantic".parse::<StrategyKind>().unwrap(), StrategyKind::ViewSemantic);
    }

    fn record(seed: u64, hair: Option<f64>) -> MultiViewRecord {
        let mut spec = generate_subject(seed);
        if let Some(h) = hair {
            spec.hair_coverage = h;
        }
        let cfg = RecordConfig {
            resolution: 32,
            n_views: 6,
            poses: PoseDistribution::full_sphere(),
            jitter_level: 0.0,
        };
        build_record(&spec, &cfg, &embedder()).unwrap()
    }

    #[test]
    fn condition_for_strategies() {
        let e = embedder();
        let rec = record(3, None);
        let a = condition_for(StrategyKind::SemanticFront, &rec, 1, &e).unwrap();
        let b = condition_for(StrategyKind::SemanticFront, &rec, 4, &e).unwrap();
        assert_eq!(a, b);
        let f = condition_for(StrategyKind::View, &rec, 0, &e).unwrap();
        let g = condition_for(StrategyKind::View, &rec, 3, &e).unwrap();
        assert_ne!(f, g);
        assert!(condition_for(StrategyKind::Unconditional, &rec, 2, &e).unwrap().is_empty());
        assert!(condition_for(StrategyKind::View, &rec, 99, &e).is_err());
    }

    #[test]
    fn view_semantic_differs_front_to_back() {
        let e = embedder();
        let spec = {
            let mut s = generate_subject(21);
            s.hair_coverage = 1.0;
            s
        };
        let (front, _) = render_ground_truth(&spec, &CameraPose::front(), 32, 0.0, 0).unwrap();
        let back_pose = CameraPose::from_degrees(180.0, 0.0).unwrap();
        let (back, _) = render_ground_truth(&spec, &back_pose, 32, 0.0, 0).unwrap();
        let d = e.embed(&front).unwrap().l2_distance(&e.embed(&back).unwrap());
        assert!(d > 0.0);
    }

    #[test]
    fn invariance_scores_order() {
        let e = embedder();
        let recs: Vec<_> = (0..12).map(|s| record(100 + s, None)).collect();
        let sem = view_invariance_score(StrategyKind::SemanticFront, &recs, &e).unwrap();
        assert_eq!(sem, 1.0);
        let view = view_invariance_score(StrategyKind::View, &recs, &e).unwrap();
        assert!(view < 1.0);
        let vs = view_invariance_score(StrategyKind::ViewSemantic, &recs, &e).unwrap();
        assert!(vs < sem);
        let id = view_invariance_score(StrategyKind::IdentityCurrent, &recs, &e).unwrap();
        assert!(id < 1.0);
        assert_eq!(
            view_invariance_score(StrategyKind::Unconditional, &recs, &e).unwrap(),
            1.0
        );
    }
}
