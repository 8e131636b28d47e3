//! Differentiable volume rendering of a feature field plus the learned
//! residual upsampler.

use candle_core::{DType, Tensor};
use rand::{Rng, RngCore};

use crate::camera::{generate_rays, CameraPose, Rays};
use crate::error::{Error, Result};
use crate::neural_field::{sample_features, Decoder, FieldSample, PlaneSet};
use crate::nn::{lrelu, tensor_from, to_f64_vec, upsample_bilinear, EqConv2d, ParamStore, LRELU_GAIN};
use crate::raster::{Image, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    /// Low-resolution ray grid side r.
    pub resolution: usize,
    /// Upsampler factor; output side is r * factor.
    pub upsample_factor: usize,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub stratified: bool,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        let radius = crate::camera::DEFAULT_RADIUS;
        Self {
            resolution: 32,
            upsample_factor: 2,
            samples_per_ray: 64,
            near: 0.5 * radius,
            far: 1.5 * radius,
            stratified: false,
            background: [0.5; 3],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::invalid("samples_per_ray must be >= 2"));
        }
        if self.resolution < 2 {
            return Err(Error::invalid("render resolution must be >= 2"));
        }
        if !matches!(self.upsample_factor, 2 | 4) {
            return Err(Error::invalid(format!(
                "upsample factor must be 2 or 4, got {}",
                self.upsample_factor
            )));
        }
        Ok(())
    }

    pub fn output_resolution(&self) -> usize {
        self.resolution * self.upsample_factor
    }

    pub fn delta(&self) -> f64 {
        (self.far - self.near) / self.samples_per_ray as f64
    }
}

/// Anything that yields density and colour for per-item point lists.
pub trait Field {
    fn batch(&self) -> usize;
    fn eval(&self, points: &[Vec<[f64; 3]>]) -> Result<FieldSample>;
}

/// Plane stack + decoder. Density is zero outside the [-1, 1]^3 box so
/// border texels do not smear into the rest of the scene.
pub struct PlaneField<'a> {
    pub planes: &'a PlaneSet,
    pub decoder: &'a Decoder,
}

impl Field for PlaneField<'_> {
    fn batch(&self) -> usize {
        self.planes.batch
    }

    fn eval(&self, points: &[Vec<[f64; 3]>]) -> Result<FieldSample> {
        let feats = sample_features(self.planes, points)?;
        let s = self.decoder.decode(&feats)?;
        let inside: Vec<f64> = points
            .iter()
            .flatten()
            .map(|p| {
                if p.iter().all(|v| v.abs() <= 1.0) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let n = inside.len();
        let inside = tensor_from(inside, n, s.sigma.dtype())?;
        Ok(FieldSample {
            sigma: (s.sigma * inside)?,
            color: s.color,
        })
    }
}

/// Field given by a host closure; used for analytic scenes.
pub struct FnField<F> {
    pub f: F,
    pub batch: usize,
    pub dtype: DType,
}

impl<F: Fn(usize, [f64; 3]) -> (f64, [f64; 3])> Field for FnField<F> {
    fn batch(&self) -> usize {
        self.batch
    }

    fn eval(&self, points: &[Vec<[f64; 3]>]) -> Result<FieldSample> {
        let mut sigma = Vec::new();
        let mut color = Vec::new();
        for (b, pts) in points.iter().enumerate() {
            for &p in pts {
                let (s, c) = (self.f)(b, p);
                sigma.push(s);
                color.extend_from_slice(&c);
            }
        }
        let n = sigma.len();
        Ok(FieldSample {
            sigma: tensor_from(sigma, n, self.dtype)?,
            color: tensor_from(color, (n, 3), self.dtype)?,
        })
    }
}

/// Low-resolution render: image (B, 3, r, r), mask and depth (B, 1, r, r).
#[derive(Debug, Clone)]
pub struct LowRes {
    pub image: Tensor,
    pub mask: Tensor,
    pub depth: Tensor,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Tensor,
    pub mask: Tensor,
    pub depth: Tensor,
    /// (B, 3, R, R)
    pub image_hr: Tensor,
    /// (B, 1, R, R)
    pub mask_hr: Tensor,
}

/// Sample distances along every ray, row-major (ray, sample).
fn sample_distances(rays: usize, cfg: &RenderConfig, rng: Option<&mut dyn RngCore>) -> Vec<f64> {
    let s = cfg.samples_per_ray;
    let delta = cfg.delta();
    let mut t = Vec::with_capacity(rays * s);
    match rng {
        Some(rng) if cfg.stratified => {
            for _ in 0..rays {
                for k in 0..s {
                    t.push(cfg.near + (k as f64 + rng.gen::<f64>()) * delta);
                }
            }
        }
        _ => {
            for _ in 0..rays {
                for k in 0..s {
                    t.push(cfg.near + (k as f64 + 0.5) * delta);
                }
            }
        }
    }
    t
}

/// Quadrature over per-sample densities (M*S,) and colours (M*S, 3).
/// Returns (image (M, 3), mask (M,), depth (M,)).
pub fn composite(
    sigma: &Tensor,
    color: &Tensor,
    t: &[f64],
    cfg: &RenderConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = cfg.samples_per_ray;
    let n = sigma.dims1()?;
    if n % s != 0 || t.len() != n || color.dims2()? != (n, 3) {
        return Err(Error::Shape(format!(
            "composite: {n} densities, {} distances, colour {:?}, {s} samples per ray",
            t.len(),
            color.dims()
        )));
    }
    let host = to_f64_vec(sigma)?;
    if let Some(i) = host.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "density {} at ray {}, sample {}",
            host[i],
            i / s,
            i % s
        )));
    }
    let m = n / s;
    let dtype = sigma.dtype();
    let device = sigma.device();
    let tau = (sigma.reshape((m, s))? * cfg.delta())?;
    // exclusive prefix sum via a strictly upper-triangular matrix
    let mut tri = vec![0.0; s * s];
    for j in 0..s {
        for k in (j + 1)..s {
            tri[j * s + k] = 1.0;
        }
    }
    let tri = tensor_from(tri, (s, s), dtype)?.to_device(device)?;
    let trans = tau.matmul(&tri)?.neg()?.exp()?;
    let alpha = (1.0 - tau.neg()?.exp()?)?;
    let w = (trans * alpha)?;
    let mask = w.sum(1)?;
    let rgb = w
        .unsqueeze(2)?
        .broadcast_mul(&color.reshape((m, s, 3))?)?
        .sum(1)?;
    let bg = tensor_from(cfg.background.to_vec(), (1, 3), dtype)?;
    let image = (rgb + (1.0 - mask.unsqueeze(1)?)?.broadcast_mul(&bg)?)?;
    let tt = tensor_from(t.to_vec(), (m, s), dtype)?;
    let depth = ((w * tt)?.sum(1)? / mask.clamp(1e-8, f64::INFINITY)?)?;
    Ok((image, mask, depth))
}

/// Renders one low-resolution view per batch item.
pub fn volume_render(
    field: &dyn Field,
    poses: &[CameraPose],
    cfg: &RenderConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<LowRes> {
    cfg.validate()?;
    if poses.len() != field.batch() {
        return Err(Error::Shape(format!(
            "{} poses for a field batch of {}",
            poses.len(),
            field.batch()
        )));
    }
    let r = cfg.resolution;
    let s = cfg.samples_per_ray;
    let rays: Vec<Rays> = poses
        .iter()
        .map(|p| generate_rays(p, r))
        .collect::<Result<_>>()?;
    let t = sample_distances(poses.len() * r * r, cfg, rng);
    let mut points = Vec::with_capacity(poses.len());
    for (b, ray) in rays.iter().enumerate() {
        let mut pts = Vec::with_capacity(r * r * s);
        for (m, (o, d)) in ray.origins.iter().zip(&ray.directions).enumerate() {
            for k in 0..s {
                let tk = t[(b * r * r + m) * s + k];
                pts.push([o[0] + tk * d[0], o[1] + tk * d[1], o[2] + tk * d[2]]);
            }
        }
        points.push(pts);
    }
    let sample = field.eval(&points)?;
    let (image, mask, depth) = composite(&sample.sigma, &sample.color, &t, cfg)?;
    let b = poses.len();
    Ok(LowRes {
        image: image.reshape((b, r, r, 3))?.permute((0, 3, 1, 2))?.contiguous()?,
        mask: mask.reshape((b, 1, r, r))?,
        depth: depth.reshape((b, 1, r, r))?,
    })
}

/// Bilinear upsampling plus a zero-initialized convolutional residual.
#[derive(Debug, Clone)]
pub struct Upsampler {
    conv1: EqConv2d,
    conv2: EqConv2d,
    factor: usize,
}

impl Upsampler {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !matches!(factor, 2 | 4) {
            return Err(Error::invalid(format!("upsample factor must be 2 or 4, got {factor}")));
        }
        let conv1 = EqConv2d::new(store, &format!("{name}.conv1"), 4, hidden, 3, rng)?;
        let conv2 = EqConv2d::new(store, &format!("{name}.conv2"), hidden, 4, 3, rng)?;
        let w = store.get(&format!("{name}.conv2.weight"))?;
        w.set(&w.as_tensor().zeros_like()?)?;
        Ok(Self {
            conv1,
            conv2,
            factor,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// `image` (B, 3, r, r), `mask` (B, 1, r, r) -> (B, 3, R, R), (B, 1, R, R).
    pub fn forward(&self, image: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = image.dims4()?;
        let (mb, mc, mh, mw) = mask.dims4()?;
        if c != 3 || (mb, mc, mh, mw) != (b, 1, h, w) {
            return Err(Error::Shape(format!(
                "upsampler got image {:?} and mask {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        let x = Tensor::cat(&[image, mask], 1)?;
        let up = upsample_bilinear(&x, self.factor)?;
        let h1 = (lrelu(&self.conv1.forward(&up)?)? * LRELU_GAIN)?;
        let out = (up + self.conv2.forward(&h1)?)?;
        let img = out.narrow(1, 0, 3)?;
        let m = out.narrow(1, 3, 1)?.clamp(0.0, 1.0)?;
        Ok((img, m))
    }
}

pub fn render_full(
    field: &dyn Field,
    upsampler: &Upsampler,
    poses: &[CameraPose],
    cfg: &RenderConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<RenderOutput> {
    if upsampler.factor() != cfg.upsample_factor {
        return Err(Error::invalid(format!(
            "upsampler factor {} but render config asks for {}",
            upsampler.factor(),
            cfg.upsample_factor
        )));
    }
    let low = volume_render(field, poses, cfg, rng)?;
    let (image_hr, mask_hr) = upsampler.forward(&low.image, &low.mask)?;
    Ok(RenderOutput {
        image: low.image,
        mask: low.mask,
        depth: low.depth,
        image_hr,
        mask_hr,
    })
}

/// Copies item `b` of a (B, 3, H, W) tensor into a host image.
pub fn tensor_to_image(t: &Tensor, b: usize) -> Result<Image> {
    let (_, c, h, w) = t.dims4()?;
    let v = to_f64_vec(&t.narrow(0, b, 1)?)?;
    let mut img = Image::zeros((h, w, 3));
    for k in 0..c.min(3) {
        for i in 0..h {
            for j in 0..w {
                img[(i, j, k)] = v[(k * h + i) * w + j].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(img)
}

pub fn tensor_to_mask(t: &Tensor, b: usize) -> Result<Mask> {
    let (_, _, h, w) = t.dims4()?;
    let v = to_f64_vec(&t.narrow(0, b, 1)?.narrow(1, 0, 1)?)?;
    Ok(Mask::from_shape_fn((h, w), |(i, j)| v[i * w + j].clamp(0.0, 1.0) as f32))
}

/// Stacks host images into a (B, 3, H, W) tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("no images to stack"))?;
    let (h, w, _) = first.dim();
    let mut v = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(Error::Shape(format!("image {:?} vs {:?}", img.dim(), (h, w, 3))));
        }
        for k in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    v.push(img[(i, j, k)] as f64);
                }
            }
        }
    }
    tensor_from(v, (images.len(), 3, h, w), dtype)
}

pub fn masks_to_tensor(masks: &[&Mask], dtype: DType) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("no masks to stack"))?;
    let (h, w) = first.dim();
    let mut v = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!("mask {:?} vs {:?}", m.dim(), (h, w))));
        }
        v.extend(m.iter().map(|&x| x as f64));
    }
    tensor_from(v, (masks.len(), 1, h, w), dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_field::{PlaneKind, PlaneLayout};
    use crate::nn::scalar_f64;
    use candle_core::Var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(res: usize, samples: usize) -> RenderConfig {
        RenderConfig {
            resolution: res,
            samples_per_ray: samples,
            ..RenderConfig::default()
        }
    }

    fn homogeneous(s: f64, n: usize) -> Vec<f64> {
        let c = cfg(4, n);
        let t: Vec<f64> = (0..n).map(|k| c.near + (k as f64 + 0.5) * c.delta()).collect();
        let sigma = tensor_from(vec![s; n], n, DType::F64).unwrap();
        let color = tensor_from(vec![0.2; 3 * n], (n, 3), DType::F64).unwrap();
        let (_, mask, _) = composite(&sigma, &color, &t, &c).unwrap();
        to_f64_vec(&mask).unwrap()
    }

    #[test]
    fn empty_field_is_background() {
        let f = FnField {
            f: |_, _| (0.0, [1.0, 0.0, 0.0]),
            batch: 1,
            dtype: DType::F64,
        };
        let low = volume_render(&f, &[CameraPose::front()], &cfg(6, 8), None).unwrap();
        assert!(to_f64_vec(&low.mask).unwrap().iter().all(|&m| m == 0.0));
        assert!(to_f64_vec(&low.image).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn homogeneous_medium_transmittance() {
        let c = cfg(4, 256);
        let s = 0.4;
        let expected = 1.0 - (-s * (c.far - c.near)).exp();
        let m256 = homogeneous(s, 256)[0];
        assert!((m256 - expected).abs() < 1e-3);
        let m512 = homogeneous(s, 512)[0];
        assert!((m512 - m256).abs() < 1e-3);
    }

    #[test]
    fn opaque_front_slab_occludes() {
        let c = cfg(4, 64);
        let n = 64;
        let t: Vec<f64> = (0..n).map(|k| c.near + (k as f64 + 0.5) * c.delta()).collect();
        let mid = 0.5 * (c.near + c.far);
        let mut sigma = Vec::new();
        let mut color = Vec::new();
        for &tk in &t {
            if tk < mid {
                sigma.push(200.0);
                color.extend_from_slice(&[1.0, 0.0, 0.0]);
            } else {
                sigma.push(1.0);
                color.extend_from_slice(&[0.0, 1.0, 0.0]);
            }
        }
        let (img, mask, _) = composite(
            &tensor_from(sigma, n, DType::F64).unwrap(),
            &tensor_from(color, (n, 3), DType::F64).unwrap(),
            &t,
            &c,
        )
        .unwrap();
        let img = to_f64_vec(&img).unwrap();
        assert!(img[1] < 1e-6, "back colour leaked: {}", img[1]);
        assert!((img[0] - 1.0).abs() < 1e-6);
        assert!((to_f64_vec(&mask).unwrap()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn weights_normalized_and_transmittance_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(4, 32);
        let n = 32 * 20;
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let t: Vec<f64> = (0..n).map(|i| c.near + ((i % 32) as f64 + 0.5) * c.delta()).collect();
        let (_, mask, depth) = composite(
            &tensor_from(sigma.clone(), n, DType::F64).unwrap(),
            &tensor_from(vec![0.5; 3 * n], (n, 3), DType::F64).unwrap(),
            &t,
            &c,
        )
        .unwrap();
        for m in to_f64_vec(&mask).unwrap() {
            assert!((-1e-6..=1.0 + 1e-6).contains(&m));
        }
        for d in to_f64_vec(&depth).unwrap() {
            assert!(d >= 0.0);
        }
        for ray in sigma.chunks(32) {
            let mut trans = 1.0;
            for &s in ray {
                let next = trans * (-s * c.delta()).exp();
                assert!(next <= trans);
                trans = next;
            }
        }
    }

    #[test]
    fn non_finite_density_names_ray() {
        let f = FnField {
            f: |_, p: [f64; 3]| (if p[0] > 0.3 { f64::NAN } else { 0.1 }, [0.0; 3]),
            batch: 1,
            dtype: DType::F64,
        };
        let err = volume_render(&f, &[CameraPose::front()], &cfg(4, 8), None).unwrap_err();
        assert!(err.to_string().contains("ray"), "{err}");
    }

    #[test]
    fn sphere_projects_to_analytic_disk() {
        let rho = 0.6;
        let f = FnField {
            f: move |_, p: [f64; 3]| {
                let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
                (if r2 < rho * rho { 400.0 } else { 0.0 }, [1.0; 3])
            },
            batch: 1,
            dtype: DType::F64,
        };
        let res = 32;
        let c = cfg(res, 256);
        let pose = CameraPose::front();
        let low = volume_render(&f, &[pose], &c, None).unwrap();
        let m = to_f64_vec(&low.mask).unwrap();
        let row = res / 2;
        let diameter = (0..res).filter(|&j| m[row * res + j] > 0.5).count() as f64;
        let ang = (rho / pose.radius).asin();
        let expected = 2.0 * pose.focal() * ang.tan() * res as f64;
        assert!((diameter - expected).abs() <= 1.0, "{diameter} vs {expected}");
    }

    #[test]
    fn mirrored_field_mirrors_image() {
        let field = |p: [f64; 3]| {
            let s = if (p[0] - 0.3).powi(2) + p[1].powi(2) + (p[2] - 0.1).powi(2) < 0.25 {
                8.0
            } else {
                0.0
            };
            (s, [0.5 + 0.4 * p[0].tanh(), 0.5 + 0.3 * p[1].tanh(), 0.4])
        };
        let a = FnField {
            f: move |_, p| field(p),
            batch: 1,
            dtype: DType::F64,
        };
        let b = FnField {
            f: move |_, p: [f64; 3]| field([-p[0], p[1], p[2]]),
            batch: 1,
            dtype: DType::F64,
        };
        let c = cfg(12, 48);
        let pa = CameraPose::from_degrees(35.0, 10.0).unwrap();
        let pb = CameraPose::from_degrees(-35.0, 10.0).unwrap();
        let ia = to_f64_vec(&volume_render(&a, &[pa], &c, None).unwrap().image).unwrap();
        let ib = to_f64_vec(&volume_render(&b, &[pb], &c, None).unwrap().image).unwrap();
        let r = 12;
        for k in 0..3 {
            for i in 0..r {
                for j in 0..r {
                    let x = ia[(k * r + i) * r + j];
                    let y = ib[(k * r + i) * r + (r - 1 - j)];
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    fn upsampler(seed: u64) -> (ParamStore, Upsampler) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F64);
        let up = Upsampler::new(&mut store, "up", 6, 2, &mut rng).unwrap();
        (store, up)
    }

    #[test]
    fn zero_residual_is_bilinear() {
        let (_, up) = upsampler(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.gen()).collect();
        let msk: Vec<f64> = (0..2 * 16).map(|_| rng.gen()).collect();
        let img = tensor_from(img, (2, 3, 4, 4), DType::F64).unwrap();
        let msk = tensor_from(msk, (2, 1, 4, 4), DType::F64).unwrap();
        let (hi, mhi) = up.forward(&img, &msk).unwrap();
        let bi = upsample_bilinear(&img, 2).unwrap();
        let bm = upsample_bilinear(&msk, 2).unwrap();
        let diff = (hi - bi).unwrap().abs().unwrap().max_keepdim(0).unwrap().flatten_all().unwrap();
        assert_eq!(to_f64_vec(&diff).unwrap().iter().cloned().fold(0.0, f64::max), 0.0);
        let dm = to_f64_vec(&(mhi - bm).unwrap()).unwrap();
        assert!(dm.iter().all(|&d| d == 0.0));

        let constant = tensor_from(vec![0.3; 3 * 16], (1, 3, 4, 4), DType::F64).unwrap();
        let ones = tensor_from(vec![1.0; 16], (1, 1, 4, 4), DType::F64).unwrap();
        let (hi, mhi) = up.forward(&constant, &ones).unwrap();
        assert!(to_f64_vec(&hi).unwrap().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(to_f64_vec(&mhi).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(up.forward(&constant, &tensor_from(vec![1.0; 9], (1, 1, 3, 3), DType::F64).unwrap()).is_err());
    }

    #[test]
    fn upsampler_residual_gradient() {
        let (store, up) = upsampler(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // give the residual path non-zero weights so both convs carry signal
        let w2 = store.get("up.conv2.weight").unwrap();
        let vals: Vec<f64> = (0..w2.elem_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        w2.set(&tensor_from(vals, w2.dims(), DType::F64).unwrap()).unwrap();
        let img = tensor_from((0..48).map(|_| rng.gen()).collect(), (1, 3, 4, 4), DType::F64).unwrap();
        let msk = tensor_from((0..16).map(|_| rng.gen()).collect(), (1, 1, 4, 4), DType::F64).unwrap();
        let pixel = |up: &Upsampler| {
            let (hi, _) = up.forward(&img, &msk).unwrap();
            hi.narrow(1, 1, 1).unwrap().narrow(2, 3, 1).unwrap().narrow(3, 5, 1).unwrap().sum_all().unwrap()
        };
        let var = store.get("up.conv1.weight").unwrap().clone();
        let grads = pixel(&up).backward().unwrap();
        let g = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
        let base = to_f64_vec(var.as_tensor()).unwrap();
        let h = 1e-4;
        let idx = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[idx] += delta;
            var.set(&tensor_from(v, var.dims(), DType::F64).unwrap()).unwrap();
            scalar_f64(&pixel(&up)).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((fd - g[idx]).abs() / fd.abs().max(1e-12) < 1e-3, "{fd} vs {}", g[idx]);
    }

    #[test]
    fn pixel_gradients_through_planes_and_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new(DType::F64);
        let decoder = Decoder::new(&mut store, "dec", 3, 8, &mut rng).unwrap();
        let layout = PlaneLayout::new(PlaneKind::HyPlane, 4, 3);
        let n = layout.rows_per_item() * 3;
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let planes_var = Var::from_tensor(&tensor_from(values.clone(), (layout.rows_per_item(), 3), DType::F64).unwrap()).unwrap();
        let c = cfg(4, 12);
        let pose = CameraPose::from_degrees(20.0, 5.0).unwrap();
        let render = |t: &Tensor| {
            let planes = PlaneSet::new(layout, 1, t.clone()).unwrap();
            let field = PlaneField { planes: &planes, decoder: &decoder };
            let low = volume_render(&field, &[pose], &c, None).unwrap();
            // one pixel of the green channel
            low.image.narrow(1, 1, 1).unwrap().narrow(2, 2, 1).unwrap().narrow(3, 1, 1).unwrap().sum_all().unwrap()
        };
        let grads = render(planes_var.as_tensor()).backward().unwrap();
        let g = to_f64_vec(grads.get(planes_var.as_tensor()).unwrap()).unwrap();
        let h = 1e-4;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
        for &i in order.iter().take(6) {
            let f = |d: f64| {
                let mut v = values.clone();
                v[i] += d;
                scalar_f64(&render(&tensor_from(v, (layout.rows_per_item(), 3), DType::F64).unwrap())).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-12) < 1e-3, "texel {i}: {fd} vs {}", g[i]);
        }
        // decoder hidden weight
        let w = store.get("dec.hidden.weight").unwrap().clone();
        let gw = to_f64_vec(grads.get(w.as_tensor()).unwrap()).unwrap();
        let base = to_f64_vec(w.as_tensor()).unwrap();
        let i = (0..gw.len()).max_by(|&a, &b| gw[a].abs().partial_cmp(&gw[b].abs()).unwrap()).unwrap();
        let f = |d: f64| {
            let mut v = base.clone();
            v[i] += d;
            w.set(&tensor_from(v, w.dims(), DType::F64).unwrap()).unwrap();
            scalar_f64(&render(planes_var.as_tensor())).unwrap()
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((fd - gw[i]).abs() / fd.abs().max(1e-12) < 1e-3, "{fd} vs {}", gw[i]);
    }

    #[test]
    fn render_full_of_empty_field() {
        let (_, up) = upsampler(8);
        let f = FnField {
            f: |_, _| (0.0, [0.0; 3]),
            batch: 2,
            dtype: DType::F64,
        };
        let c = RenderConfig {
            resolution: 4,
            samples_per_ray: 4,
            ..RenderConfig::default()
        };
        let out = render_full(&f, &up, &[CameraPose::front(), CameraPose::from_degrees(90.0, 0.0).unwrap()], &c, None).unwrap();
        assert_eq!(out.image_hr.dims(), &[2, 3, 8, 8]);
        assert!(to_f64_vec(&out.image_hr).unwrap().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(to_f64_vec(&out.mask_hr).unwrap().iter().all(|&v| v == 0.0));
        let mut bad = c.clone();
        bad.near = 5.0;
        assert!(render_full(&f, &up, &[CameraPose::front(); 2], &bad, None).is_err());
    }

    #[test]
    fn stratified_samples_stay_in_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = RenderConfig {
            stratified: true,
            samples_per_ray: 8,
            ..RenderConfig::default()
        };
        let t = sample_distances(3, &c, Some(&mut rng));
        for (i, &tk) in t.iter().enumerate() {
            let k = (i % 8) as f64;
            assert!(tk >= c.near + k * c.delta() && tk <= c.near + (k + 1.0) * c.delta());
        }
    }
}
