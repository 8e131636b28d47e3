//! Frozen evaluation features, Frechet distance with the three rendering
//! protocols, MKNND diversity, a perceptual distance and the collapse monitor.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::{label_to_pose, sample_pose, CameraPose, PoseDistribution};
use crate::conditioning::StrategyKind;
use crate::error::{Error, Result};
use crate::gan::{ConditionTable, Generator};
use crate::nn::{tensor_from, to_f64_vec};
use crate::raster::{resize_square, Image};
use crate::renderer::images_to_tensor;
use crate::synthdata::{Dataset, ViewTag};

pub const FEATURE_DIM: usize = 64;
/// Seed of the evaluation embedder, unrelated to the conditioning embedder.
pub const FEATURE_SEED: u64 = 0x0e7a_1fea;
pub const MIN_EVAL: usize = 256;
pub const DEFAULT_EVAL: usize = 2048;
pub const DEFAULT_K: usize = 5;
pub const COLLAPSE_THETA: f64 = 0.3;
/// Negative eigenvalues down to this are clipped silently.
pub const CLIP_TOL: f64 = 1e-8;
/// Negative eigenvalues below this fail the square root.
pub const FAIL_TOL: f64 = 1e-6;

const C1: usize = 16;
const C2: usize = 32;
const POOL_GRID: usize = 4;
const CHUNK: usize = 128;

/// Two frozen random convolutions with tanh activations. FID features are
/// the second layer pooled to a 4x4 grid and projected to `dim`; the
/// perceptual distance compares both layers' activation maps.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    seed: u64,
    dim: usize,
    w1: Vec<f64>,
    w2: Vec<f64>,
    proj: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        };
        let w1 = gauss(C1 * 3 * 9, 2.0 / 27f64.sqrt());
        let w2 = gauss(C2 * C1 * 9, 2.0 / ((C1 * 9) as f64).sqrt());
        let pooled = C2 * POOL_GRID * POOL_GRID;
        let proj = gauss(pooled * dim, 1.0 / (pooled as f64).sqrt());
        Ok(Self { seed, dim, w1, w2, proj })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Activation maps of both layers for (B, 3, H, W) images in [0, 1].
    fn layers(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != w || h % 2 != 0 {
            return Err(Error::Shape(format!(
                "feature extractor expects (B, 3, R, R) with even R, got {:?}",
                x.dims()
            )));
        }
        let dt = x.dtype();
        let w1 = tensor_from(self.w1.clone(), (C1, 3, 3, 3), dt)?;
        let w2 = tensor_from(self.w2.clone(), (C2, C1, 3, 3), dt)?;
        let a1 = (x - 0.5)?.conv2d(&w1, 1, 1, 1, 1)?.tanh()?;
        let a2 = a1.avg_pool2d(2)?.conv2d(&w2, 1, 1, 1, 1)?.tanh()?;
        Ok((a1, a2))
    }

    /// (B, dim) features; the resolution must be a multiple of 8.
    pub fn features_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, _) = x.dims4()?;
        if h % (2 * POOL_GRID) != 0 {
            return Err(Error::Shape(format!("feature resolution {h} is not a multiple of 8")));
        }
        let (_, a2) = self.layers(x)?;
        let pooled = a2.avg_pool2d(h / 2 / POOL_GRID)?.reshape((b, C2 * POOL_GRID * POOL_GRID))?;
        let proj = tensor_from(self.proj.clone(), (C2 * POOL_GRID * POOL_GRID, self.dim), x.dtype())?;
        Ok(pooled.matmul(&proj)?)
    }

    /// Host features of a (B, 3, R, R) tensor, computed in double precision.
    pub fn features_of(&self, x: &Tensor) -> Result<Array2<f64>> {
        let b = x.dims4()?.0;
        let mut out = Vec::with_capacity(b * self.dim);
        let mut start = 0;
        while start < b {
            let n = CHUNK.min(b - start);
            let part = x.narrow(0, start, n)?.to_dtype(DType::F64)?.clamp(0.0, 1.0)?;
            out.extend(to_f64_vec(&self.features_tensor(&part)?)?);
            start += n;
        }
        Array2::from_shape_vec((b, self.dim), out).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn extract(&self, images: &[&Image]) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(images.len() * self.dim);
        for chunk in images.chunks(CHUNK) {
            if let Some(bad) = chunk.iter().find(|i| i.iter().any(|v| !(0.0..=1.0).contains(v))) {
                return Err(Error::invalid(format!(
                    "feature extraction needs values in [0, 1]; image {:?} is out of range",
                    bad.dim()
                )));
            }
            let x = images_to_tensor(chunk, DType::F64)?;
            rows.extend(to_f64_vec(&self.features_tensor(&x)?)?);
        }
        Array2::from_shape_vec((images.len(), self.dim), rows).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Per-item perceptual distance (B,) between two image batches: mean
    /// squared difference of both activation maps, summed over the full
    /// and the half resolution. Differentiable in both inputs.
    pub fn perceptual_tensor(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("perceptual distance of {:?} vs {:?}", a.dims(), b.dims())));
        }
        let (_, _, h, _) = a.dims4()?;
        if h % 4 != 0 {
            return Err(Error::Shape(format!("perceptual distance needs a resolution divisible by 4, got {h}")));
        }
        let mut total: Option<Tensor> = None;
        for scale in [1, 2] {
            let (xa, xb) = if scale == 1 {
                (a.clone(), b.clone())
            } else {
                (a.avg_pool2d(2)?, b.avg_pool2d(2)?)
            };
            let (a1, a2) = self.layers(&xa)?;
            let (b1, b2) = self.layers(&xb)?;
            for (p, q) in [(a1, b1), (a2, b2)] {
                let d = (p - q)?.sqr()?.flatten_from(1)?.mean(1)?;
                total = Some(match total {
                    Some(t) => (t + d)?,
                    None => d,
                });
            }
        }
        total.ok_or_else(|| Error::invalid("empty perceptual stack"))
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(FEATURE_SEED, FEATURE_DIM).expect("default feature dimension is valid")
    }
}

pub fn perceptual_distance(ext: &FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("perceptual distance of {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a == b {
        return Ok(0.0);
    }
    let ta = images_to_tensor(&[a], DType::F64)?;
    let tb = images_to_tensor(&[b], DType::F64)?;
    Ok(to_f64_vec(&ext.perceptual_tensor(&ta, &tb)?)?[0])
}

/// First and second moments of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of the rows, symmetrized.
    pub fn from_features(f: &Array2<f64>) -> Result<Self> {
        let (n, d) = f.dim();
        if n < 2 {
            return Err(Error::invalid(format!("feature statistics need at least 2 samples, got {n}")));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        let m = DMatrix::from_row_iterator(n, d, f.iter().copied());
        let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.sum() / n as f64));
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, n })
    }

    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Shape(format!("covariance has {} entries for dimension {d}", cov.len())));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov: (&cov + cov.transpose()) * 0.5,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigenvalues of a symmetric matrix with small negatives clipped to zero.
fn checked_eigen(m: &DMatrix<f64>) -> Result<std::result::Result<SymmetricEigen<f64, nalgebra::Dyn>, f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    if min < -FAIL_TOL {
        return Err(Error::SqrtFailure {
            min_eigenvalue: min,
            spectrum: eig.eigenvalues.iter().copied().collect(),
        });
    }
    if min < -CLIP_TOL {
        return Ok(Err(min));
    }
    Ok(Ok(eig))
}

fn psd_sqrt(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` through the symmetric form `(A^{1/2} B A^{1/2})^{1/2}`.
/// `None` when an eigenvalue falls between the clip and failure tolerances.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Option<f64>> {
    let ea = match checked_eigen(a)? {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    let ra = psd_sqrt(&ea);
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    Ok(match checked_eigen(&m)? {
        Ok(e) => Some(e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()),
        Err(_) => None,
    })
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// Identical moments give exactly 0. When an eigenvalue lands between
/// -1e-6 and -1e-8 the square root is retried with a ridge of
/// `1e-6 * trace / D` on both covariances.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::Shape(format!("feature dimensions {} vs {}", a.dim(), b.dim())));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let d = a.dim().max(1) as f64;
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let (mut sa, mut sb) = (a.cov.clone(), b.cov.clone());
    let mut tr_sqrt = both_orders(&sa, &sb)?;
    if tr_sqrt.is_none() {
        let ridge = 1e-6 * (sa.trace() + sb.trace()) / (2.0 * d);
        sa += DMatrix::identity(sa.nrows(), sa.ncols()) * ridge;
        sb += DMatrix::identity(sb.nrows(), sb.ncols()) * ridge;
        tr_sqrt = both_orders(&sa, &sb)?;
    }
    let tr_sqrt = tr_sqrt.ok_or_else(|| {
        let eig = SymmetricEigen::new(sa.clone());
        Error::SqrtFailure {
            min_eigenvalue: eig.eigenvalues.min(),
            spectrum: eig.eigenvalues.iter().copied().collect(),
        }
    })?;
    let dist = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if !dist.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(dist.max(0.0))
}

/// Average of both argument orders, so the result is exactly symmetric.
fn both_orders(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Option<f64>> {
    Ok(match (trace_sqrt_product(a, b)?, trace_sqrt_product(b, a)?) {
        (Some(x), Some(y)) => Some(0.5 * (x + y)),
        _ => None,
    })
}

pub fn fid_of_features(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    frechet_distance(&FeatureStats::from_features(a)?, &FeatureStats::from_features(b)?)
}

fn select_rows(f: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    f.select(ndarray::Axis(0), idx)
}

/// FID between two disjoint random halves of a feature set.
pub fn split_half_fid(f: &Array2<f64>, seed: u64) -> Result<f64> {
    let n = f.nrows();
    if n < 4 {
        return Err(Error::invalid(format!("split-half FID needs at least 4 samples, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n / 2);
    fid_of_features(&select_rows(f, a), &select_rows(f, &b[..a.len()]))
}

/// Mean over rows of the mean cosine distance to the `k` nearest other rows.
pub fn mknnd(f: &Array2<f64>, k: usize) -> Result<f64> {
    let (n, _) = f.dim();
    if k == 0 || n <= k {
        return Err(Error::invalid(format!("mknnd needs N > k >= 1, got N = {n}, k = {k}")));
    }
    let mut unit = Vec::with_capacity(n);
    for (i, row) in f.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid(format!("feature row {i} has norm {norm}")));
        }
        unit.push(row.mapv(|v| v / norm));
    }
    let mut total = 0.0;
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        for j in (0..n).filter(|&j| j != i) {
            let d = if f.row(i) == f.row(j) {
                0.0
            } else {
                (1.0 - unit[i].dot(&unit[j])).max(0.0)
            };
            dists.push(d);
        }
        dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        let mut nearest = dists[..k].to_vec();
        nearest.sort_by(|a, b| a.total_cmp(b));
        total += nearest.iter().sum::<f64>() / k as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub series: Vec<f64>,
    pub theta: f64,
    /// First snapshot at or below `theta` times the running peak.
    pub collapsed_at: Option<usize>,
}

impl CollapseReport {
    pub fn collapsed(&self) -> bool {
        self.collapsed_at.is_some()
    }
}

/// Flags collapse once diversity drops to `theta` of its running peak. A
/// series that is zero from the start counts as collapsed at once.
pub fn collapse_monitor(series: &[f64], theta: f64) -> Result<CollapseReport> {
    if series.len() < 2 {
        return Err(Error::invalid(format!("collapse monitor needs 2 snapshots, got {}", series.len())));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("collapse threshold {theta} outside [0, 1]")));
    }
    let mut peak = f64::NEG_INFINITY;
    let mut collapsed_at = None;
    for (i, &v) in series.iter().enumerate() {
        peak = peak.max(v);
        if v <= theta * peak {
            collapsed_at = Some(i);
            break;
        }
    }
    Ok(CollapseReport {
        series: series.to_vec(),
        theta,
        collapsed_at,
    })
}

/// MKNND of each snapshot's features, fed to the collapse monitor.
pub fn collapse_from_snapshots(snapshots: &[Array2<f64>], k: usize, theta: f64) -> Result<CollapseReport> {
    let series = snapshots.iter().map(|f| mknnd(f, k)).collect::<Result<Vec<_>>>()?;
    collapse_monitor(&series, theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolKind {
    FidView,
    FidRandom,
    FidFront,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 3] = [ProtocolKind::FidView, ProtocolKind::FidRandom, ProtocolKind::FidFront];

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolKind::FidView => "fid_view",
            ProtocolKind::FidRandom => "fid_random",
            ProtocolKind::FidFront => "fid_front",
        }
    }

    /// Rendering pose distribution for poses not tied to a real view.
    pub fn poses(&self) -> PoseDistribution {
        match self {
            ProtocolKind::FidFront => PoseDistribution::front(),
            _ => PoseDistribution::full_sphere(),
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown protocol '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub kind: ProtocolKind,
    pub n_eval: usize,
    pub seed: u64,
}

impl EvalProtocol {
    pub fn new(kind: ProtocolKind, n_eval: usize, seed: u64) -> Self {
        Self { kind, n_eval, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_eval < MIN_EVAL {
            return Err(Error::invalid(format!(
                "{} needs at least {MIN_EVAL} samples, got {}",
                self.kind, self.n_eval
            )));
        }
        Ok(())
    }
}

/// Whether a conditional view exists for the strategy.
pub fn fid_view_defined(kind: StrategyKind) -> bool {
    kind.is_view_dependent()
}

/// What plays the generator during evaluation.
#[derive(Clone, Copy)]
pub enum FakeSource<'a> {
    Generator {
        g: &'a Generator,
        table: &'a ConditionTable,
    },
    /// Real dataset images served as samples.
    Replay(&'a Dataset),
}

impl FakeSource<'_> {
    fn resolution(&self) -> usize {
        match self {
            FakeSource::Generator { g, .. } => g.cfg.output_resolution(),
            FakeSource::Replay(d) => d.meta.resolution,
        }
    }
}

fn front_index(ds: &Dataset, r: usize) -> Result<usize> {
    ds.records[r]
        .views
        .iter()
        .position(|v| v.tag == ViewTag::Front)
        .ok_or_else(|| Error::invalid(format!("subject {} has no front view", ds.records[r].subject_id)))
}

/// Generator inputs for one protocol: conditions drawn from the dataset's
/// condition pool and rendering poses per protocol.
pub fn protocol_inputs(
    g: &Generator,
    table: &ConditionTable,
    ds: &Dataset,
    protocol: &EvalProtocol,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<CameraPose>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut z = Vec::with_capacity(protocol.n_eval);
    let mut conds = Vec::with_capacity(protocol.n_eval);
    let mut poses = Vec::with_capacity(protocol.n_eval);
    let kind = table.kind;
    for _ in 0..protocol.n_eval {
        let r = rng.gen_range(0..ds.len());
        let v = rng.gen_range(0..ds.records[r].views.len());
        z.push(g.sample_z(&mut rng));
        match protocol.kind {
            ProtocolKind::FidView => {
                conds.push(table.cond[r][v].clone());
                poses.push(label_to_pose(&ds.records[r].views[v].camera)?);
            }
            ProtocolKind::FidRandom => {
                conds.push(table.cond[r][v].clone());
                poses.push(sample_pose(&protocol.kind.poses(), &mut rng));
            }
            ProtocolKind::FidFront => {
                let front = CameraPose::front();
                conds.push(match kind {
                    StrategyKind::View => front.to_label().0.to_vec(),
                    _ => table.cond[r][front_index(ds, r)?].clone(),
                });
                poses.push(front);
            }
        }
    }
    Ok((z, conds, poses))
}

/// Real-side features, computed once per dataset and resolution.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub extractor: FeatureExtractor,
    pub resolution: usize,
    pub all_views: Array2<f64>,
    pub front_views: Array2<f64>,
}

impl Evaluator {
    pub fn new(ds: &Dataset, extractor: FeatureExtractor, resolution: usize) -> Result<Self> {
        let mut all = Vec::new();
        let mut front = Vec::new();
        for rec in &ds.records {
            for v in &rec.views {
                let img = resize_square(&v.image, resolution)?;
                if v.tag == ViewTag::Front {
                    front.push(img.clone());
                }
                all.push(img);
            }
        }
        let all_views = extractor.extract(&all.iter().collect::<Vec<_>>())?;
        let front_views = extractor.extract(&front.iter().collect::<Vec<_>>())?;
        Ok(Self {
            extractor,
            resolution,
            all_views,
            front_views,
        })
    }

    /// Real features for a protocol: a seeded subset of at most `n_eval`.
    pub fn real_features(&self, protocol: &EvalProtocol) -> Result<Array2<f64>> {
        let pool = match protocol.kind {
            ProtocolKind::FidFront => &self.front_views,
            _ => &self.all_views,
        };
        let need = self.extractor.dim() + 1;
        if pool.nrows() < need {
            return Err(Error::invalid(format!(
                "{} has {} real images, needs at least {need}",
                protocol.kind,
                pool.nrows()
            )));
        }
        let mut idx: Vec<usize> = (0..pool.nrows()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(protocol.seed ^ 0x7ea1));
        idx.truncate(protocol.n_eval);
        idx.sort_unstable();
        Ok(select_rows(pool, &idx))
    }

    pub fn fake_features(&self, source: FakeSource<'_>, ds: &Dataset, protocol: &EvalProtocol) -> Result<Array2<f64>> {
        match source {
            FakeSource::Generator { g, table } => {
                let (z, conds, poses) = protocol_inputs(g, table, ds, protocol)?;
                let mut parts = Vec::new();
                for start in (0..z.len()).step_by(CHUNK) {
                    let end = (start + CHUNK).min(z.len());
                    let (out, _) = g.generate(&z[start..end], &conds[start..end], &poses[start..end])?;
                    parts.push(self.extractor.features_of(&out.image_hr)?);
                }
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
            }
            FakeSource::Replay(replay) => {
                let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
                let mut imgs = Vec::with_capacity(protocol.n_eval);
                for _ in 0..protocol.n_eval {
                    let r = rng.gen_range(0..replay.len());
                    let v = match protocol.kind {
                        ProtocolKind::FidFront => front_index(replay, r)?,
                        _ => rng.gen_range(0..replay.records[r].views.len()),
                    };
                    imgs.push(resize_square(&replay.records[r].views[v].image, self.resolution)?);
                }
                self.extractor.extract(&imgs.iter().collect::<Vec<_>>())
            }
        }
    }

    /// FID for one protocol; `None` when the protocol is undefined for the
    /// source (fid_view without a conditional view).
    pub fn evaluate_fid(&self, source: FakeSource<'_>, ds: &Dataset, protocol: &EvalProtocol) -> Result<Option<f64>> {
        protocol.validate()?;
        if source.resolution() != self.resolution {
            return Err(Error::Shape(format!(
                "source renders at {}, evaluator was built for {}",
                source.resolution(),
                self.resolution
            )));
        }
        if let (ProtocolKind::FidView, FakeSource::Generator { table, .. }) = (protocol.kind, source) {
            if !fid_view_defined(table.kind) {
                return Ok(None);
            }
        }
        let real = self.real_features(protocol)?;
        let fake = self.fake_features(source, ds, protocol)?;
        Ok(Some(fid_of_features(&real, &fake)?))
    }

    /// Split-half FID of the real features a protocol uses.
    pub fn noise_floor(&self, protocol: &EvalProtocol) -> Result<f64> {
        split_half_fid(&self.real_features(protocol)?, protocol.seed)
    }

    /// All requested protocols plus the sample diversity at random views.
    pub fn report(&self, source: FakeSource<'_>, ds: &Dataset, protocols: &[EvalProtocol]) -> Result<EvalReport> {
        let mut rows = Vec::with_capacity(protocols.len());
        for p in protocols {
            p.validate()?;
            if source.resolution() != self.resolution {
                return Err(Error::Shape(format!(
                    "source renders at {}, evaluator was built for {}",
                    source.resolution(),
                    self.resolution
                )));
            }
            let fake = self.fake_features(source, ds, p)?;
            let defined = match (p.kind, source) {
                (ProtocolKind::FidView, FakeSource::Generator { table, .. }) => fid_view_defined(table.kind),
                _ => true,
            };
            let fid = if defined {
                Some(fid_of_features(&self.real_features(p)?, &fake)?)
            } else {
                None
            };
            rows.push(EvalRow {
                protocol: p.kind,
                n: p.n_eval,
                fid,
                noise_floor: self.noise_floor(p)?,
                mknnd: mknnd(&fake, DEFAULT_K)?,
            });
        }
        Ok(EvalReport { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub protocol: ProtocolKind,
    pub n: usize,
    pub fid: Option<f64>,
    pub noise_floor: f64,
    pub mknnd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub const HEADER: &'static str = "protocol\tn\tfid\tnoise_floor\tmknnd";

    pub fn fid(&self, kind: ProtocolKind) -> Option<f64> {
        self.rows.iter().find(|r| r.protocol == kind).and_then(|r| r.fid)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\n",
                r.protocol,
                r.n,
                fmt_fid(r.fid),
                r.noise_floor,
                r.mknnd
            ));
        }
        s
    }
}

/// Six decimals, or a dash when the protocol is undefined.
pub fn fmt_fid(v: Option<f64>) -> String {
    v.map_or_else(|| "—".to_string(), |x| format!("{x:.6}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_features(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn brute_mknnd(f: &Array2<f64>, k: usize) -> f64 {
        let n = f.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let mut d = Vec::new();
            for j in 0..n {
                if i != j {
                    let (a, b) = (f.row(i), f.row(j));
                    d.push(1.0 - a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt()));
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            total += d[..k].iter().sum::<f64>() / k as f64;
        }
        total / n as f64
    }

    #[test]
    fn frechet_closed_forms() {
        let a = FeatureStats::from_moments(vec![0.0], vec![1.0], 10).unwrap();
        let b = FeatureStats::from_moments(vec![1.0], vec![1.0], 10).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        let a = FeatureStats::from_moments(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0], 10).unwrap();
        let b = FeatureStats::from_moments(vec![0.0; 2], vec![4.0, 0.0, 0.0, 4.0], 10).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn frechet_is_symmetric_on_random_sets() {
        let a = FeatureStats::from_features(&random_features(40, 6, 1)).unwrap();
        let b = FeatureStats::from_features(&(random_features(40, 6, 2) * 1.5)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        assert_eq!(ab, frechet_distance(&b, &a).unwrap());
        assert!(ab > 0.0);
    }

    #[test]
    fn frechet_rejects_indefinite_covariance() {
        let a = FeatureStats::from_moments(vec![0.0; 2], vec![1.0, 0.0, 0.0, -0.5], 10).unwrap();
        let b = FeatureStats::from_moments(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0], 10).unwrap();
        match frechet_distance(&a, &b) {
            Err(Error::SqrtFailure { spectrum, .. }) => assert_eq!(spectrum.len(), 2),
            other => panic!("expected a square-root failure, got {other:?}"),
        }
    }

    #[test]
    fn rank_deficient_covariance_still_works() {
        // n < D: singular sample covariances
        let a = FeatureStats::from_features(&random_features(5, 12, 3)).unwrap();
        let b = FeatureStats::from_features(&random_features(5, 12, 4)).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!(d.is_finite() && d > 0.0);
    }

    #[test]
    fn mknnd_small_cases() {
        let same = Array2::from_shape_fn((5, 3), |(_, j)| j as f64 + 1.0);
        assert_eq!(mknnd(&same, 2).unwrap(), 0.0);
        let ortho = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        assert!((mknnd(&ortho, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(mknnd(&ortho, 2).is_err());
        assert!(mknnd(&ndarray::array![[0.0, 0.0], [1.0, 0.0]], 1).is_err());
        let f = random_features(6, 4, 5);
        assert!((mknnd(&f, 2).unwrap() - brute_mknnd(&f, 2)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mknnd_invariances(seed in 0u64..1000, n in 6usize..20, k in 1usize..5, scale in 0.01f64..100.0) {
            let f = random_features(n, 5, seed);
            let base = mknnd(&f, k).unwrap();
            prop_assert!((base - brute_mknnd(&f, k)).abs() < 1e-12);
            prop_assert!((mknnd(&(&f * scale), k).unwrap() - base).abs() < 1e-12);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
            prop_assert!((mknnd(&select_rows(&f, &idx), k).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn collapse_thresholds() {
        let r = collapse_monitor(&[0.5, 0.5, 0.1], 0.3).unwrap();
        assert_eq!(r.collapsed_at, Some(2));
        assert!(collapse_monitor(&[0.0, 0.0], 0.3).unwrap().collapsed());
        assert!(!collapse_monitor(&[0.4, 0.5, 0.45], 0.3).unwrap().collapsed());
        assert!(collapse_monitor(&[0.4], 0.3).is_err());
    }

    #[test]
    fn extractor_is_deterministic_and_non_constant() {
        let ext = FeatureExtractor::default();
        let black = Image::zeros((16, 16, 3));
        let white = Image::ones((16, 16, 3));
        let f = ext.extract(&[&black, &white]).unwrap();
        let g = FeatureExtractor::default().extract(&[&black, &white]).unwrap();
        assert_eq!(f, g);
        assert_ne!(f.row(0), f.row(1));
        assert!(ext.extract(&[&Image::zeros((12, 12, 3))]).is_err());
        assert_ne!(ext.seed(), crate::conditioning::DEFAULT_EMBED_SEED);
    }

    #[test]
    fn perceptual_is_symmetric_and_zero_on_identity() {
        let ext = FeatureExtractor::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Image::from_shape_fn((16, 16, 3), |_| rng.gen::<f32>());
        let b = Image::from_shape_fn((16, 16, 3), |_| rng.gen::<f32>());
        assert_eq!(perceptual_distance(&ext, &a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&ext, &a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_distance(&ext, &b, &a).unwrap());
        assert!(perceptual_distance(&ext, &a, &Image::zeros((8, 8, 3))).is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for k in ProtocolKind::ALL {
            assert_eq!(k.name().parse::<ProtocolKind>().unwrap(), k);
        }
        assert!(EvalProtocol::new(ProtocolKind::FidRandom, 10, 0).validate().is_err());
        assert_eq!(fmt_fid(None), "—");
    }
}
