use candle_core::{Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::discriminator::{disc_input, real_disc_input, Discriminator};
use super::generator::Generator;
use super::pairs::make_negative_pairs;
use super::GanConfig;
use crate::camera::{label_to_pose, sample_pose, CameraPose, PoseDistribution};
use crate::conditioning::{condition_for, ConditionEmbedder, StrategyKind};
use crate::error::{Error, Result};
use crate::nn::{add_grads, collect_grads, scalar_f64, softplus, Adam, Grads};
use crate::raster::downsample_image;
use crate::renderer::{images_to_tensor, masks_to_tensor};
use crate::synthdata::Dataset;

/// Per-(record, view) generator conditions and discriminator semantic
/// labels, computed once per dataset.
#[derive(Debug, Clone)]
pub struct ConditionTable {
    pub kind: StrategyKind,
    /// `cond[record][view]`
    pub cond: Vec<Vec<Vec<f64>>>,
    /// Semantic part of the discriminator label (empty for non-semantic
    /// strategies).
    pub sem: Vec<Vec<Vec<f64>>>,
}

impl ConditionTable {
    pub fn build(dataset: &Dataset, kind: StrategyKind, embedder: &ConditionEmbedder) -> Result<Self> {
        let mut cond = Vec::with_capacity(dataset.len());
        for rec in &dataset.records {
            cond.push(
                (0..rec.views.len())
                    .map(|v| condition_for(kind, rec, v, embedder))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let sem = if kind.is_semantic() {
            cond.clone()
        } else {
            cond.iter().map(|r| vec![Vec::new(); r.len()]).collect()
        };
        Ok(Self { kind, cond, sem })
    }
}

/// One training batch: real tuples with labels plus the generator inputs.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// (B, 3, R, R)
    pub real_hr: Tensor,
    /// (B, 1, R, R)
    pub real_mask: Tensor,
    pub real_cam: Vec<Vec<f64>>,
    pub real_sem: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub gen_cond: Vec<Vec<f64>>,
    pub fake_poses: Vec<CameraPose>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Draws `batch` random (record, view) pairs and the matching
    /// generator inputs. Fake poses come from `poses` except for strategies
    /// conditioned on the current view, which render at the real view's pose.
    pub fn sample(
        g: &Generator,
        dataset: &Dataset,
        table: &ConditionTable,
        batch: usize,
        poses: &PoseDistribution,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if dataset.is_empty() || batch == 0 {
            return Err(Error::invalid("training needs a non-empty dataset and batch"));
        }
        let out_res = g.cfg.output_resolution();
        let data_res = dataset.meta.resolution;
        if data_res % out_res != 0 {
            return Err(Error::invalid(format!(
                "dataset resolution {data_res} is not a multiple of the output resolution {out_res}"
            )));
        }
        let factor = data_res / out_res;
        let mut images = Vec::with_capacity(batch);
        let mut masks = Vec::with_capacity(batch);
        let mut real_cam = Vec::with_capacity(batch);
        let mut real_sem = Vec::with_capacity(batch);
        let mut z = Vec::with_capacity(batch);
        let mut gen_cond = Vec::with_capacity(batch);
        let mut fake_poses = Vec::with_capacity(batch);
        for _ in 0..batch {
            let r = rng.gen_range(0..dataset.len());
            let rec = &dataset.records[r];
            let v = rng.gen_range(0..rec.views.len());
            let view = &rec.views[v];
            if factor == 1 {
                images.push(view.image.clone());
                masks.push(view.mask.clone());
            } else {
                images.push(downsample_image(&view.image, factor)?);
                masks.push(crate::raster::downsample_mask(&view.mask, factor)?);
            }
            real_cam.push(view.camera.0.to_vec());
            real_sem.push(table.sem[r][v].clone());
            z.push(g.sample_z(rng));
            match table.kind {
                StrategyKind::View => {
                    let pose = sample_pose(poses, rng);
                    gen_cond.push(pose.to_label().0.to_vec());
                    fake_poses.push(pose);
                }
                StrategyKind::ViewSemantic | StrategyKind::IdentityCurrent => {
                    gen_cond.push(table.cond[r][v].clone());
                    fake_poses.push(label_to_pose(&view.camera)?);
                }
                _ => {
                    gen_cond.push(table.cond[r][v].clone());
                    fake_poses.push(sample_pose(poses, rng));
                }
            }
        }
        let dtype = g.cfg.dtype;
        Ok(Self {
            real_hr: images_to_tensor(&images.iter().collect::<Vec<_>>(), dtype)?,
            real_mask: masks_to_tensor(&masks.iter().collect::<Vec<_>>(), dtype)?,
            real_cam,
            real_sem,
            z,
            gen_cond,
            fake_poses,
        })
    }

    pub fn real_labels(&self) -> Vec<Vec<f64>> {
        join_labels(&self.real_cam, &self.real_sem)
    }
}

fn join_labels(cam: &[Vec<f64>], sem: &[Vec<f64>]) -> Vec<Vec<f64>> {
    cam.iter()
        .zip(sem)
        .map(|(c, s)| {
            let mut l = c.clone();
            l.extend_from_slice(s);
            l
        })
        .collect()
}

/// Mean over the batch of `||grad_x logit||^2` and its parameter gradient.
///
/// The parameter gradient needs a second derivative, which the autodiff
/// engine does not provide; it is computed as a central finite difference
/// of first-order gradients along the input gradient direction:
/// `d/dtheta g.g = 2 [grad_theta D(x + e g) - grad_theta D(x - e g)] / 2e`.
pub fn r1_penalty(d: &Discriminator, x: &Tensor, labels: &[Vec<f64>]) -> Result<(f64, Grads)> {
    let b = x.dims4()?.0 as f64;
    let lt = d.label_tensor(labels)?;
    let xv = Var::from_tensor(&x.detach())?;
    let gs = d.forward(xv.as_tensor(), &lt)?.sum_all()?.backward()?;
    let g = match gs.get(xv.as_tensor()) {
        Some(g) => g.detach(),
        None => return Ok((0.0, Grads::new())),
    };
    let value = scalar_f64(&g.sqr()?.sum_all()?)? / b;
    let gmax = scalar_f64(&g.abs()?.max_keepdim(0)?.flatten_all()?.max(0)?)?;
    if value == 0.0 || gmax == 0.0 {
        return Ok((value, Grads::new()));
    }
    let h = if x.dtype() == candle_core::DType::F64 { 1e-5 } else { 1e-3 };
    let eps = h / gmax;
    let grad_at = |sign: f64| -> Result<Grads> {
        let xp = (x.detach() + (&g * (sign * eps))?)?;
        let gs = d.forward(&xp, &lt)?.sum_all()?.backward()?;
        Ok(collect_grads(&d.store, &gs))
    };
    let plus = grad_at(1.0)?;
    let minus = grad_at(-1.0)?;
    let grads = add_grads(&plus, &minus, -1.0)?
        .into_iter()
        .map(|(k, v)| Ok((k, (v * (1.0 / (eps * b)))?)))
        .collect::<Result<Grads>>()?;
    Ok((value, grads))
}

/// Discriminator-side ViCiCo term: real images paired with shuffled labels
/// are scored like fakes, `mean softplus(logit)`.
pub fn loss_vicico(d: &Discriminator, real_x: &Tensor, shuffled: &[Vec<f64>]) -> Result<Tensor> {
    Ok(softplus(&d.logits(real_x, shuffled)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScalars {
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    /// Last computed R1 value (lazy, so it repeats between evaluations).
    pub r1: f64,
    pub vicico: f64,
    pub logit_real: f64,
    pub logit_fake: f64,
    pub mask_mean: f64,
}

/// Generator, discriminator and both optimizers.
#[derive(Debug)]
pub struct TrainState {
    pub cfg: GanConfig,
    pub g: Generator,
    pub d: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub seed: u64,
    pub p_swap: f64,
    pub last_r1: f64,
    /// Check every parameter for non-finite values after each step.
    pub check_finite: bool,
}

impl TrainState {
    pub fn new(cfg: &GanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let g = Generator::new(cfg, seed)?;
        let d = Discriminator::new(cfg, seed.wrapping_add(0x5eed))?;
        Ok(Self {
            cfg: cfg.clone(),
            g,
            d,
            opt_g: Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2),
            step: 0,
            seed,
            p_swap: cfg.p_swap,
            last_r1: 0.0,
            check_finite: cfg!(debug_assertions),
        })
    }

    fn step_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.step);
        rng.set_stream(stream);
        rng
    }

    fn diverged(&self, what: &str, v: f64) -> Error {
        Error::Diverged {
            step: self.step,
            detail: format!("{what} = {v}"),
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepScalars> {
        let b = batch.len();
        if self.cfg.vicico && b < 2 {
            return Err(Error::invalid("vicico needs a batch of at least 2"));
        }
        let mut rng = self.step_rng(1);
        let (w, used) = self.g.map(&batch.z, &batch.gen_cond, self.p_swap, &mut rng)?;
        let planes = self.g.synthesize(&w)?;
        let render_rng: Option<&mut dyn RngCore> = if self.cfg.render.stratified {
            Some(&mut rng)
        } else {
            None
        };
        let out = self.g.render(&planes, &batch.fake_poses, render_rng)?;
        let fake_cam: Vec<Vec<f64>> = batch.fake_poses.iter().map(|p| p.to_label().0.to_vec()).collect();
        let fake_sem: Vec<Vec<f64>> = if self.cfg.semantic_label_dim() > 0 {
            used
        } else {
            vec![Vec::new(); b]
        };
        let fake_labels = join_labels(&fake_cam, &fake_sem);
        let real_labels = batch.real_labels();
        let fake_x = disc_input(&out.image_hr, &out.image, &out.mask)?;
        let real_x = real_disc_input(&batch.real_hr, &batch.real_mask, self.cfg.render.upsample_factor)?;

        // discriminator
        let logit_real = self.d.logits(&real_x, &real_labels)?;
        let logit_fake = self.d.logits(&fake_x.detach(), &fake_labels)?;
        let mut loss_d = (softplus(&logit_real.neg()?)?.mean_all()? + softplus(&logit_fake)?.mean_all()?)?;
        let mut vicico = 0.0;
        if self.cfg.vicico {
            let mut vrng = self.step_rng(2);
            let pairs = make_negative_pairs(b, &mut vrng)?;
            let shuffled = pairs.apply(&batch.real_cam, &batch.real_sem);
            let term = loss_vicico(&self.d, &real_x, &shuffled)?;
            vicico = scalar_f64(&term)?;
            if self.cfg.lambda_vicico > 0.0 {
                loss_d = (loss_d + (term * self.cfg.lambda_vicico)?)?;
            }
        }
        let loss_d_value = scalar_f64(&loss_d)?;
        if !loss_d_value.is_finite() {
            return Err(self.diverged("loss_D", loss_d_value));
        }
        let mut grads_d = collect_grads(&self.d.store, &loss_d.backward()?);
        if self.cfg.lambda_r1 > 0.0 && self.step % self.cfg.r1_interval == 0 {
            let (r1, r1_grads) = r1_penalty(&self.d, &real_x, &real_labels)?;
            if !r1.is_finite() {
                return Err(self.diverged("R1", r1));
            }
            self.last_r1 = r1;
            let scale = 0.5 * self.cfg.lambda_r1 * self.cfg.r1_interval as f64;
            grads_d = add_grads(&grads_d, &r1_grads, scale)?;
        }
        self.opt_d.step(&self.d.store, &grads_d)?;

        // generator
        let logit_g = self.d.logits(&fake_x, &fake_labels)?;
        let loss_g = softplus(&logit_g.neg()?)?.mean_all()?;
        let loss_g_value = scalar_f64(&loss_g)?;
        if !loss_g_value.is_finite() {
            return Err(self.diverged("loss_G", loss_g_value));
        }
        let grads_g = collect_grads(&self.g.store, &loss_g.backward()?);
        self.opt_g.step(&self.g.store, &grads_g)?;

        let scalars = StepScalars {
            step: self.step,
            loss_g: loss_g_value,
            loss_d: loss_d_value,
            r1: self.last_r1,
            vicico,
            logit_real: scalar_f64(&logit_real.mean_all()?)?,
            logit_fake: scalar_f64(&logit_fake.mean_all()?)?,
            mask_mean: scalar_f64(&out.mask.mean_all()?)?,
        };
        if self.check_finite {
            if !self.g.store.all_finite()? {
                return Err(self.diverged("non-finite generator parameter after update", f64::NAN));
            }
            if !self.d.store.all_finite()? {
                return Err(self.diverged("non-finite discriminator parameter after update", f64::NAN));
            }
        }
        self.step += 1;
        Ok(scalars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::generator::tests::tiny_config;
    use crate::nn::{tensor_from, to_f64_vec};
    use crate::synthdata::{generate_dataset, SynthConfig};
    use candle_core::DType;

    fn tiny_dataset(subjects: usize) -> Dataset {
        generate_dataset(&SynthConfig {
            subjects,
            views: 3,
            resolution: 8,
            embed_dim: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn setup(kind: StrategyKind) -> (TrainState, Dataset, ConditionTable) {
        let cfg = tiny_config(kind);
        let ds = tiny_dataset(3);
        let emb = ConditionEmbedder::new(ds.meta.embed_seed, 8, true).unwrap();
        let table = ConditionTable::build(&ds, kind, &emb).unwrap();
        (TrainState::new(&cfg, 1).unwrap(), ds, table)
    }

    fn batch(st: &TrainState, ds: &Dataset, table: &ConditionTable, seed: u64) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainBatch::sample(&st.g, ds, table, 3, &PoseDistribution::full_sphere(), &mut rng).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (mut st, ds, table) = setup(StrategyKind::SemanticFront);
        st.opt_g.lr = 0.0;
        st.opt_d.lr = 0.0;
        let (g0, d0) = (st.g.store.digest().unwrap(), st.d.store.digest().unwrap());
        let b = batch(&st, &ds, &table, 2);
        st.train_step(&b).unwrap();
        assert_eq!(g0, st.g.store.digest().unwrap());
        assert_eq!(d0, st.d.store.digest().unwrap());
    }

    #[test]
    fn semantic_conditions_come_from_the_front_view() {
        let (st, ds, table) = setup(StrategyKind::SemanticFront);
        for (r, rec) in ds.records.iter().enumerate() {
            for v in 0..rec.views.len() {
                assert_eq!(table.cond[r][v], rec.condition.values);
            }
        }
        let b = batch(&st, &ds, &table, 3);
        assert_eq!(b.real_labels()[0].len(), st.d.label_dim());
    }

    #[test]
    fn zero_weight_vicico_matches_baseline() {
        let (mut a, ds, table) = setup(StrategyKind::SemanticFront);
        let (mut c, _, _) = setup(StrategyKind::SemanticFront);
        c.cfg.vicico = true;
        c.cfg.lambda_vicico = 0.0;
        for s in 0..2 {
            let b = batch(&a, &ds, &table, 10 + s);
            let x = a.train_step(&b).unwrap();
            let y = c.train_step(&b).unwrap();
            assert_eq!((x.loss_d, x.loss_g), (y.loss_d, y.loss_g));
            assert!(y.vicico > 0.0);
        }
        assert_eq!(a.g.store.digest().unwrap(), c.g.store.digest().unwrap());
    }

    #[test]
    fn r1_zero_for_constant_discriminator() {
        let (st, ds, table) = setup(StrategyKind::View);
        for (_, v) in st.d.store.iter() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let b = batch(&st, &ds, &table, 4);
        let x = real_disc_input(&b.real_hr, &b.real_mask, 2).unwrap();
        let (r1, grads) = r1_penalty(&st.d, &x, &b.real_labels()).unwrap();
        assert_eq!(r1, 0.0);
        assert!(grads.is_empty());
    }

    #[test]
    fn r1_parameter_gradient_matches_finite_difference() {
        let (st, ds, table) = setup(StrategyKind::SemanticFront);
        let b = batch(&st, &ds, &table, 5);
        let x = real_disc_input(&b.real_hr, &b.real_mask, 2).unwrap();
        let labels = b.real_labels();
        let (_, grads) = r1_penalty(&st.d, &x, &labels).unwrap();
        for name in ["d.fc.weight", "d.cmap.weight", "d.block0.weight"] {
            let var = st.d.store.get(name).unwrap().clone();
            let g = to_f64_vec(&grads[name]).unwrap();
            let base = to_f64_vec(var.as_tensor()).unwrap();
            let i = (0..g.len()).max_by(|&a, &c| g[a].abs().partial_cmp(&g[c].abs()).unwrap()).unwrap();
            let h = 1e-4;
            let f = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                var.set(&tensor_from(v, var.dims(), DType::F64).unwrap()).unwrap();
                r1_penalty(&st.d, &x, &labels).unwrap().0
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            f(0.0);
            assert!((fd - g[i]).abs() / fd.abs().max(1e-12) < 1e-3, "{name}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn vicico_requires_pairs() {
        let (mut st, ds, table) = setup(StrategyKind::SemanticFront);
        st.cfg.vicico = true;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = TrainBatch::sample(&st.g, &ds, &table, 1, &PoseDistribution::full_sphere(), &mut rng).unwrap();
        assert!(st.train_step(&b).is_err());
    }

    #[test]
    fn view_strategy_conditions_on_render_pose() {
        let (st, ds, table) = setup(StrategyKind::View);
        let b = batch(&st, &ds, &table, 6);
        for (c, p) in b.gen_cond.iter().zip(&b.fake_poses) {
            assert_eq!(c, &p.to_label().0.to_vec());
        }
        assert!(b.real_sem.iter().all(Vec::is_empty));
    }
}
