//! Two-stage single-view inversion: optimize a latent pivot with the
//! generator frozen, then fine-tune a copy of the generator around it.

use candle_core::Tensor;
use sha2::{Digest, Sha256};

use crate::camera::{label_to_pose, CameraPose};
use crate::conditioning::{ConditionEmbedder, StrategyKind};
use crate::error::{Error, Result};
use crate::gan::{ConditionTable, Generator};
use crate::metrics::{perceptual_distance, FeatureExtractor};
use crate::nn::{collect_grads, scalar_f64, Adam, ParamStore};
use crate::raster::{downsample_mask, resize_square, Image, Mask};
use crate::renderer::{images_to_tensor, tensor_to_image, tensor_to_mask, RenderOutput};
use crate::synthdata::{MultiViewRecord, ViewTag};

pub const MEAN_SAMPLES: usize = 10_000;
pub const DEFAULT_STEPS: usize = 300;
const PIVOT: &str = "pivot";

/// Where the fixed condition comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    /// The conditioning embedder applied to the target image.
    TargetEmbedding,
    /// Mean of the dataset's condition pool, for targets that are not
    /// frontal.
    PoolMean,
}

#[derive(Debug, Clone)]
pub struct InversionTask {
    pub target: Image,
    pub mask: Mask,
    pub pose: CameraPose,
    pub c_fixed: Vec<f64>,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lambda_pix: f64,
    pub lambda_perc: f64,
    pub lr_w: f64,
    pub lr_g: f64,
    /// Optimize one w per synthesis layer instead of a shared w.
    pub w_plus: bool,
    pub mean_samples: usize,
    pub seed: u64,
}

impl InversionTask {
    pub fn new(target: Image, mask: Mask, pose: CameraPose, c_fixed: Vec<f64>) -> Self {
        Self {
            target,
            mask,
            pose,
            c_fixed,
            stage1_steps: DEFAULT_STEPS,
            stage2_steps: DEFAULT_STEPS,
            lambda_pix: 1.0,
            lambda_perc: 1.0,
            lr_w: 0.05,
            lr_g: 1e-3,
            w_plus: false,
            mean_samples: MEAN_SAMPLES,
            seed: 0,
        }
    }

    pub fn validate(&self, g: &Generator) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lambda_pix >= 0.0 && self.lambda_perc >= 0.0) {
            problems.push(format!("loss weights must be >= 0, got {} and {}", self.lambda_pix, self.lambda_perc));
        }
        if !(self.lr_w >= 0.0 && self.lr_g >= 0.0) {
            problems.push("learning rates must be >= 0".to_string());
        }
        if self.mean_samples == 0 {
            problems.push("mean_samples must be positive".to_string());
        }
        let need = g.cfg.strategy.dimension;
        if self.c_fixed.len() != need {
            problems.push(format!(
                "fixed condition has {} dims, strategy {} needs {need}",
                self.c_fixed.len(),
                g.cfg.strategy.kind
            ));
        }
        if self.mask.dim() != (self.target.dim().0, self.target.dim().1) {
            problems.push(format!("mask {:?} does not match target {:?}", self.mask.dim(), self.target.dim()));
        }
        let res = g.cfg.output_resolution();
        let side = self.target.dim().0;
        if self.target.dim().1 != side || side % res != 0 && res % side != 0 {
            problems.push(format!("target {:?} cannot be resampled to {res}", self.target.dim()));
        }
        if let Err(e) = CameraPose::new(self.pose.yaw, self.pose.pitch, self.pose.radius, self.pose.fov) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// The condition held fixed during inversion.
pub fn fixed_condition(
    source: ConditionSource,
    kind: StrategyKind,
    target: &Image,
    pose: &CameraPose,
    embedder: &ConditionEmbedder,
    pool: Option<&ConditionTable>,
) -> Result<Vec<f64>> {
    match (source, kind) {
        (_, StrategyKind::Unconditional) => Ok(Vec::new()),
        (ConditionSource::TargetEmbedding, StrategyKind::View) => Ok(pose.to_label().0.to_vec()),
        (ConditionSource::TargetEmbedding, StrategyKind::ViewSemantic | StrategyKind::SemanticFront) => {
            Ok(embedder.embed(target)?.values)
        }
        (ConditionSource::TargetEmbedding, StrategyKind::IdentityCurrent | StrategyKind::IdentityFront) => {
            Ok(embedder.embed_identity(target)?.values)
        }
        (ConditionSource::PoolMean, _) => {
            let table = pool.ok_or_else(|| Error::invalid("the pool-mean condition needs a condition table"))?;
            let all: Vec<&Vec<f64>> = table.cond.iter().flatten().collect();
            let first = all.first().ok_or_else(|| Error::invalid("empty condition pool"))?;
            let mut mean = vec![0.0; first.len()];
            for c in &all {
                mean.iter_mut().zip(c.iter()).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= all.len() as f64);
            Ok(mean)
        }
    }
}

pub fn condition_hash(c: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in c {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
pub struct StageOne {
    /// (1, w_dim) or (1, num_ws, w_dim) with `w_plus`.
    pub pivot: Tensor,
    pub losses: Vec<f64>,
    pub condition_hash: String,
}

#[derive(Debug)]
pub struct InversionResult {
    pub pivot: Tensor,
    pub w_plus: bool,
    pub generator: Generator,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    /// Final (pixel, perceptual) loss components.
    pub final_components: (f64, f64),
    pub reconstruction: Image,
    pub reconstruction_mask: Mask,
    pub condition_hash: String,
}

impl InversionResult {
    /// Loss of the kept parameters: the best seen in the last stage run.
    pub fn final_loss(&self) -> f64 {
        let curve = if self.stage2_losses.is_empty() { &self.stage1_losses } else { &self.stage2_losses };
        curve.iter().copied().fold(f64::NAN, f64::min)
    }

    pub fn initial_loss(&self) -> f64 {
        self.stage1_losses.first().copied().unwrap_or(f64::NAN)
    }
}

/// Renders a pivot at one pose.
pub fn render_pivot(g: &Generator, pivot: &Tensor, w_plus: bool, pose: &CameraPose) -> Result<RenderOutput> {
    let ws = if w_plus { pivot.clone() } else { g.w_plus(pivot)? };
    let planes = g.synthesis.forward(&ws)?;
    g.render(&planes, std::slice::from_ref(pose), None)
}

struct Objective {
    target: Tensor,
    ext: FeatureExtractor,
    lambda_pix: f64,
    lambda_perc: f64,
}

impl Objective {
    fn new(task: &InversionTask, g: &Generator, ext: &FeatureExtractor) -> Result<Self> {
        let res = g.cfg.output_resolution();
        let target = resize_square(&task.target, res)?;
        Ok(Self {
            target: images_to_tensor(&[&target], g.cfg.dtype)?,
            ext: ext.clone(),
            lambda_pix: task.lambda_pix,
            lambda_perc: task.lambda_perc,
        })
    }

    /// (total, pixel, perceptual) with the total still on the graph.
    fn eval(&self, image: &Tensor) -> Result<(Tensor, f64, f64)> {
        let pix = (image - &self.target)?.sqr()?.mean_all()?;
        let perc = self.ext.perceptual_tensor(image, &self.target)?.mean_all()?;
        let total = ((&pix * self.lambda_pix)? + (&perc * self.lambda_perc)?)?;
        Ok((total, scalar_f64(&pix)?, scalar_f64(&perc)?))
    }
}

fn check_finite(stage: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step: step as u64,
            detail: format!("{stage} loss is {loss}"),
        })
    }
}

/// Stage one: gradient descent on the pivot with the generator frozen,
/// starting from the mean w under the fixed condition. Returns the best
/// pivot seen, so the final loss never exceeds the initial one.
pub fn invert_stage1(task: &InversionTask, g: &Generator, ext: &FeatureExtractor) -> Result<StageOne> {
    task.validate(g)?;
    let hash = condition_hash(&task.c_fixed);
    let objective = Objective::new(task, g, ext)?;
    let mean = g.mean_w(&task.c_fixed, task.mean_samples, task.seed)?;
    let init = if task.w_plus { g.w_plus(&mean)? } else { mean };
    let mut store = ParamStore::new(g.cfg.dtype);
    let var = store.constant(PIVOT, init.dims(), 0.0)?;
    var.set(&init)?;
    let mut opt = Adam::new(task.lr_w, 0.9, 0.999);
    let mut losses = Vec::with_capacity(task.stage1_steps + 1);
    let mut best = (f64::INFINITY, init.copy()?);
    for step in 0..=task.stage1_steps {
        let out = render_pivot(g, var.as_tensor(), task.w_plus, &task.pose)?;
        let (total, _, _) = objective.eval(&out.image_hr)?;
        let loss = scalar_f64(&total)?;
        check_finite("stage 1", step, loss)?;
        losses.push(loss);
        if loss < best.0 {
            best = (loss, var.as_tensor().copy()?);
        }
        if step == task.stage1_steps {
            break;
        }
        let grads = collect_grads(&store, &total.backward()?);
        opt.step(&store, &grads)?;
    }
    if condition_hash(&task.c_fixed) != hash {
        return Err(Error::invalid("fixed condition changed during stage 1"));
    }
    Ok(StageOne {
        pivot: best.1,
        losses,
        condition_hash: hash,
    })
}

/// Stage two: the pivot is frozen and a copy of the generator is tuned on
/// the same objective. The best parameters seen are kept.
pub fn invert_stage2(
    task: &InversionTask,
    g: &Generator,
    stage1: StageOne,
    ext: &FeatureExtractor,
) -> Result<InversionResult> {
    task.validate(g)?;
    let objective = Objective::new(task, g, ext)?;
    let tuned = g.duplicate()?;
    let pivot = stage1.pivot.detach();
    let mut opt = Adam::new(task.lr_g, 0.9, 0.999);
    let mut losses = Vec::with_capacity(task.stage2_steps + 1);
    let mut best: Option<(f64, ParamStore, (f64, f64))> = None;
    for step in 0..=task.stage2_steps {
        let out = render_pivot(&tuned, &pivot, task.w_plus, &task.pose)?;
        let (total, pix, perc) = objective.eval(&out.image_hr)?;
        let loss = scalar_f64(&total)?;
        check_finite("stage 2", step, loss)?;
        losses.push(loss);
        if best.as_ref().map_or(true, |b| loss < b.0) {
            best = Some((loss, tuned.store.deep_clone()?, (pix, perc)));
        }
        if step == task.stage2_steps {
            break;
        }
        let grads = collect_grads(&tuned.store, &total.backward()?);
        opt.step(&tuned.store, &grads)?;
    }
    let (_, params, components) = best.ok_or_else(|| Error::invalid("stage 2 produced no loss"))?;
    tuned.store.assign_from(&params)?;
    let stage1_final = *stage1.losses.iter().min_by(|a, b| a.total_cmp(b)).unwrap_or(&f64::INFINITY);
    let stage2_final = losses.iter().copied().fold(f64::INFINITY, f64::min);
    if stage2_final > stage1_final + 1e-6 {
        return Err(Error::invalid(format!(
            "stage 2 loss {stage2_final} exceeds stage 1 loss {stage1_final}"
        )));
    }
    if condition_hash(&task.c_fixed) != stage1.condition_hash {
        return Err(Error::invalid("fixed condition changed between stages"));
    }
    let out = render_pivot(&tuned, &pivot, task.w_plus, &task.pose)?;
    Ok(InversionResult {
        pivot,
        w_plus: task.w_plus,
        generator: tuned,
        stage1_losses: stage1.losses,
        stage2_losses: losses,
        final_components: components,
        reconstruction: tensor_to_image(&out.image_hr, 0)?,
        reconstruction_mask: tensor_to_mask(&out.mask_hr, 0)?,
        condition_hash: stage1.condition_hash,
    })
}

pub fn invert(task: &InversionTask, g: &Generator, ext: &FeatureExtractor) -> Result<InversionResult> {
    let s1 = invert_stage1(task, g, ext)?;
    invert_stage2(task, g, s1, ext)
}

/// Intersection over union of masks thresholded at 0.5. Two empty masks
/// score 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("mask {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (p, q) = (x >= 0.5, y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewScore {
    pub tag: ViewTag,
    pub pose: CameraPose,
    pub perceptual: f64,
    pub iou: f64,
}

/// Renders a model at every view of a record and scores each render
/// against the held-out image and mask.
pub fn score_views(
    g: &Generator,
    pivot: &Tensor,
    w_plus: bool,
    record: &MultiViewRecord,
    ext: &FeatureExtractor,
) -> Result<Vec<ViewScore>> {
    let res = g.cfg.output_resolution();
    let mut scores = Vec::with_capacity(record.views.len());
    for view in &record.views {
        let pose = label_to_pose(&view.camera)?;
        let out = render_pivot(g, pivot, w_plus, &pose)?;
        let image = tensor_to_image(&out.image_hr, 0)?;
        let mask = tensor_to_mask(&out.mask_hr, 0)?;
        let side = view.mask.dim().0;
        let truth_mask = if side == res {
            view.mask.clone()
        } else if side % res == 0 {
            downsample_mask(&view.mask, side / res)?
        } else {
            return Err(Error::Shape(format!("view resolution {side} is not a multiple of {res}")));
        };
        scores.push(ViewScore {
            tag: view.tag,
            pose,
            perceptual: perceptual_distance(ext, &image, &resize_square(&view.image, res)?)?,
            iou: mask_iou(&mask, &truth_mask)?,
        });
    }
    Ok(scores)
}

pub fn novel_view_eval(
    result: &InversionResult,
    record: &MultiViewRecord,
    ext: &FeatureExtractor,
) -> Result<Vec<ViewScore>> {
    score_views(&result.generator, &result.pivot, result.w_plus, record, ext)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::generator::tests::tiny_config;
    use crate::renderer::tensor_to_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn self_target(g: &Generator, seed: u64) -> (Image, Mask, CameraPose, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = vec![g.sample_z(&mut rng)];
        let c: Vec<f64> = (0..g.cfg.strategy.dimension).map(|i| ((i as f64) * 0.7).sin()).collect();
        let pose = CameraPose::from_degrees(30.0, 10.0).unwrap();
        let (out, _) = g.generate(&z, &[c.clone()], &[pose]).unwrap();
        (
            tensor_to_image(&out.image_hr, 0).unwrap(),
            tensor_to_mask(&out.mask_hr, 0).unwrap(),
            pose,
            c,
        )
    }

    fn task(g: &Generator, steps: usize) -> InversionTask {
        let (img, mask, pose, c) = self_target(g, 3);
        let mut t = InversionTask::new(img, mask, pose, c);
        t.stage1_steps = steps;
        t.stage2_steps = steps;
        t.mean_samples = 200;
        t
    }

    #[test]
    fn zero_steps_keep_the_initialization() {
        let g = Generator::new(&tiny_config(StrategyKind::SemanticFront), 1).unwrap();
        let ext = FeatureExtractor::default();
        let t = task(&g, 0);
        let s1 = invert_stage1(&t, &g, &ext).unwrap();
        let mean = g.mean_w(&t.c_fixed, t.mean_samples, t.seed).unwrap();
        assert_eq!(s1.pivot.to_vec2::<f64>().unwrap(), mean.to_vec2::<f64>().unwrap());
        assert_eq!(s1.losses.len(), 1);
        let before = g.store.digest().unwrap();
        let r = invert_stage2(&t, &g, s1, &ext).unwrap();
        assert_eq!(r.generator.store.digest().unwrap(), before);
        assert_eq!(r.final_loss(), r.initial_loss());
    }

    #[test]
    fn stages_descend_and_leave_the_original_untouched() {
        let g = Generator::new(&tiny_config(StrategyKind::SemanticFront), 2).unwrap();
        let before = g.store.digest().unwrap();
        let ext = FeatureExtractor::default();
        let t = task(&g, 15);
        let s1 = invert_stage1(&t, &g, &ext).unwrap();
        assert_eq!(g.store.digest().unwrap(), before);
        let pivot = s1.pivot.to_vec2::<f64>().unwrap();
        let s1_best = s1.losses.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(s1_best < s1.losses[0]);
        let r = invert_stage2(&t, &g, s1, &ext).unwrap();
        assert_eq!(r.pivot.to_vec2::<f64>().unwrap(), pivot);
        assert!(r.final_loss() <= s1_best + 1e-6);
        assert_eq!(g.store.digest().unwrap(), before);
        assert_ne!(r.generator.store.digest().unwrap(), before);
        assert!(r.stage1_losses.iter().chain(&r.stage2_losses).all(|l| l.is_finite()));
    }

    #[test]
    fn fitted_view_scores_the_final_perceptual_component() {
        let g = Generator::new(&tiny_config(StrategyKind::SemanticFront), 4).unwrap();
        let ext = FeatureExtractor::default();
        let t = task(&g, 3);
        let r = invert(&t, &g, &ext).unwrap();
        let recon = r.reconstruction.clone();
        let target = resize_square(&t.target, g.cfg.output_resolution()).unwrap();
        let d = perceptual_distance(&ext, &recon, &target).unwrap();
        assert!((d - r.final_components.1).abs() < 1e-9 * d.max(1.0), "{d} vs {:?}", r.final_components);
    }

    #[test]
    fn iou_edge_cases() {
        let empty = Mask::zeros((4, 4));
        let full = Mask::ones((4, 4));
        assert_eq!(mask_iou(&empty, &full).unwrap(), 0.0);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(mask_iou(&full, &full).unwrap(), 1.0);
        assert!(mask_iou(&empty, &Mask::zeros((2, 2))).is_err());
    }

    #[test]
    fn condition_sources() {
        let embedder = ConditionEmbedder::new(1, 8, true).unwrap();
        let img = Image::from_elem((16, 16, 3), 0.3);
        let pose = CameraPose::front();
        let c = fixed_condition(ConditionSource::TargetEmbedding, StrategyKind::SemanticFront, &img, &pose, &embedder, None)
            .unwrap();
        assert_eq!(c, embedder.embed(&img).unwrap().values);
        let v = fixed_condition(ConditionSource::TargetEmbedding, StrategyKind::View, &img, &pose, &embedder, None).unwrap();
        assert_eq!(v, pose.to_label().0.to_vec());
        assert!(fixed_condition(ConditionSource::PoolMean, StrategyKind::SemanticFront, &img, &pose, &embedder, None).is_err());
        let bad = InversionTask::new(img, Mask::zeros((16, 16)), pose, vec![0.0; 3]);
        let g = Generator::new(&tiny_config(StrategyKind::SemanticFront), 1).unwrap();
        assert!(matches!(bad.validate(&g), Err(Error::Config(_))));
    }
}
