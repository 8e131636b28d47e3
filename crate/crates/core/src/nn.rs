//! Tensor-side building blocks on top of `candle-core`: a named parameter
//! store, equalized-learning-rate layers, StyleGAN2 modulated convolution,
//! Adam, bilinear resampling matrices and the gather-sum op that backs
//! plane feature lookup.
//!
//! Every random initial value is drawn on the host from a seeded ChaCha
//! stream so that models are bit-reproducible across runs.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Host data to a tensor of the requested dtype.
pub fn tensor_from(values: Vec<f64>, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.reshape(())?.to_scalar::<f64>()?)
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LRELU_SLOPE)?)?)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x.neg()?.exp()? + 1.0)?.recip())?)
}

/// Named trainable tensors in a deterministic (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        let var = Var::from_tensor(&tensor_from(values, shape, self.dtype)?)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every value into fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            dtype: self.dtype,
        })
    }

    /// Overwrites values from `other`, which must hold the same names and shapes.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &self.vars {
            let src = other.get(k)?;
            v.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Loads values by name; every stored parameter must be present.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        let mut missing = Vec::new();
        for (k, v) in &self.vars {
            match tensors.get(&format!("{prefix}{k}")) {
                Some(t) if t.dims() == v.dims() => v.set(&t.to_dtype(self.dtype)?)?,
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{prefix}{k}' has shape {:?}, expected {:?}",
                        t.dims(),
                        v.dims()
                    )))
                }
                None => missing.push(format!("{prefix}{k}")),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks fields: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in to_f64_vec(v.as_tensor())? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            if to_f64_vec(v.as_tensor())?.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

/// Pulls the gradients of every parameter in `store` out of a backward pass.
pub fn collect_grads(store: &ParamStore, grads: &candle_core::backprop::GradStore) -> Grads {
    store
        .iter()
        .filter_map(|(k, v)| grads.get(v.as_tensor()).map(|g| (k.clone(), g.clone())))
        .collect()
}

/// `a + scale * b`, key-wise; keys missing on one side are taken as zero.
pub fn add_grads(a: &Grads, b: &Grads, scale: f64) -> Result<Grads> {
    let mut out = a.clone();
    for (k, g) in b {
        let scaled = (g * scale)?;
        let v = match out.remove(k) {
            Some(prev) => (prev + scaled)?,
            None => scaled,
        };
        out.insert(k.clone(), v);
    }
    Ok(out)
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &ParamStore, grads: &Grads) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(name) else { continue };
            let g = g.detach();
            let (m, v) = match self.moments.remove(name) {
                Some((m, v)) => (
                    ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => ((&g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?),
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor() - (update * self.lr)?)?;
            var.set(&next.detach())?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    pub fn state_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, (m, v)) in &self.moments {
            out.insert(format!("{prefix}m.{k}"), m.clone());
            out.insert(format!("{prefix}v.{k}"), v.clone());
        }
        out.insert(
            format!("{prefix}step"),
            Tensor::new(&[self.step as f64], &Device::Cpu).expect("scalar tensor"),
        );
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        self.moments.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(&format!("{prefix}m.")) {
                let v = tensors
                    .get(&format!("{prefix}v.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer lacks v.{name}")))?;
                self.moments.insert(name.to_string(), (t.clone(), v.clone()));
            }
        }
        if let Some(s) = tensors.get(&format!("{prefix}step")) {
            self.step = to_f64_vec(s)?[0] as u64;
        }
        Ok(())
    }
}

/// Fully connected layer with runtime weight scaling `lr_mul / sqrt(fan_in)`.
#[derive(Debug, Clone)]
pub struct EqLinear {
    weight: Var,
    bias: Option<Var>,
    scale: f64,
    lr_mul: f64,
}

impl EqLinear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_init: Option<f64>,
        lr_mul: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[out_dim, in_dim], 1.0 / lr_mul, rng)?;
        let bias = match bias_init {
            Some(b) => Some(store.constant(&format!("{name}.bias"), &[out_dim], b / lr_mul)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            scale: lr_mul / (in_dim as f64).sqrt(),
            lr_mul,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str, lr_mul: f64) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"))?.clone();
        let bias = store.get(&format!("{name}.bias")).ok().cloned();
        let in_dim = weight.dims()[1];
        Ok(Self {
            weight,
            bias,
            scale: lr_mul / (in_dim as f64).sqrt(),
            lr_mul,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = (self.weight.as_tensor() * self.scale)?;
        let y = x.matmul(&w.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&(b.as_tensor() * self.lr_mul)?)?,
            None => y,
        })
    }
}

/// Plain convolution with equalized learning rate.
/// Stride-1 convolution as im2col plus a batched matmul. The upstream
/// conv2d op returns wrong kernel gradients for batch > 1 and its backward
/// pass is slow on CPU.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, ci, kh, kw) = w.dims4()?;
    if ci != c || kh != kw || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "conv input {:?} with kernel {:?} and padding {padding}",
            x.dims(),
            w.dims()
        )));
    }
    let (oh, ow) = (h + 2 * padding + 1 - kh, wd + 2 * padding + 1 - kw);
    let cols = if kh == 1 && padding == 0 {
        x.reshape((b, c, h * wd))?.transpose(0, 1)?.reshape((c, b * h * wd))?
    } else {
        let op = Unfold {
            c,
            h,
            w: wd,
            k: kh,
            pad: padding,
        };
        x.contiguous()?.apply_op1(op)?
    };
    let y = w.reshape((o, c * kh * kw))?.matmul(&cols)?;
    Ok(y.reshape((o, b, oh, ow))?.transpose(0, 1)?.contiguous()?)
}

/// im2col for square kernels: (B, C, H, W) -> (C*K*K, B*OH*OW).
#[derive(Debug, Clone, Copy)]
struct Unfold {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Unfold {
    fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad + 1 - self.k, self.w + 2 * self.pad + 1 - self.k)
    }

    /// Calls `f(input_index, column_index)` for every in-bounds tap.
    fn for_each_tap(&self, batch: usize, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let (k, pad) = (self.k, self.pad as isize);
        for b in 0..batch {
            for ci in 0..self.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let col_base = (row * batch + b) * oh * ow;
                        for oy in 0..oh {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let in_base = ((b * self.c + ci) * self.h + iy as usize) * self.w;
                            for ox in 0..ow {
                                let ix = ox as isize + kx as isize - pad;
                                if ix >= 0 && ix < self.w as isize {
                                    f(in_base + ix as usize, col_base + oy * ow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, x: &[T], batch: usize) -> Vec<T> {
        let (oh, ow) = self.out_hw();
        let mut out = vec![T::default(); batch * self.c * self.k * self.k * oh * ow];
        self.for_each_tap(batch, |i, o| out[o] = x[i]);
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let mut out = vec![T::default(); batch * self.c * self.h * self.w];
        self.for_each_tap(batch, |i, o| out[i] += cols[o]);
        out
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{what} needs a contiguous input")))?;
    Ok(&v[start..end])
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        if (c, h, w) != (self.c, self.h, self.w) {
            candle_core::bail!("unfold built for {:?}, got {:?}", (self.c, self.h, self.w), (c, h, w))
        }
        let (oh, ow) = self.out_hw();
        let shape = Shape::from((c * self.k * self.k, b * oh * ow));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold(contiguous_slice(v, layout, "unfold")?, b)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold(contiguous_slice(v, layout, "unfold")?, b)),
            _ => candle_core::bail!("unfold supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Fold(*self))?))
    }
}

/// Adjoint of [`Unfold`]: sums columns back onto the image.
#[derive(Debug, Clone, Copy)]
struct Fold(Unfold);

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let u = self.0;
        let (rows, cols) = layout.shape().dims2()?;
        let (oh, ow) = u.out_hw();
        if rows != u.c * u.k * u.k || cols % (oh * ow) != 0 {
            candle_core::bail!("fold got a ({rows}, {cols}) column matrix for {:?}", (u.c, u.k, oh, ow))
        }
        let b = cols / (oh * ow);
        let shape = Shape::from((b, u.c, u.h, u.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(u.fold(contiguous_slice(v, layout, "fold")?, b)),
            CpuStorage::F64(v) => CpuStorage::F64(u.fold(contiguous_slice(v, layout, "fold")?, b)),
            _ => candle_core::bail!("fold supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(self.0)?))
    }
}

#[derive(Debug, Clone)]
pub struct EqConv2d {
    weight: Var,
    bias: Var,
    scale: f64,
    padding: usize,
}

impl EqConv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 1.0, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            scale: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(),
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = (self.weight.as_tensor() * self.scale)?;
        let y = conv2d(x, &w, self.padding)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// StyleGAN2 modulated convolution, in the non-fused form: scale input
/// channels by the style, convolve with the shared kernel, then demodulate
/// each output channel.
#[derive(Debug, Clone)]
pub struct ModConv {
    affine: EqLinear,
    weight: Var,
    bias: Var,
    scale: f64,
    padding: usize,
    demodulate: bool,
    activate: bool,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w_dim: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        demodulate: bool,
        activate: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let affine = EqLinear::new(store, &format!("{name}.affine"), w_dim, in_ch, Some(1.0), 1.0, rng)?;
        let weight = store.normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 1.0, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Self {
            affine,
            weight,
            bias,
            scale: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(),
            padding: kernel / 2,
            demodulate,
            activate,
        })
    }

    /// `x`: (B, in, H, W), `w`: (B, w_dim).
    pub fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let styles = self.affine.forward(w)?;
        let weight = (self.weight.as_tensor() * self.scale)?;
        let xs = x.broadcast_mul(&styles.unsqueeze(2)?.unsqueeze(3)?)?;
        let mut y = conv2d(&xs, &weight, self.padding)?;
        if self.demodulate {
            // (B, in) @ (in, out): sum_i s_i^2 sum_k W_{o,i,k}^2
            let w2 = weight.sqr()?.sum((2, 3))?;
            let d = (styles.sqr()?.matmul(&w2.t()?)? + 1e-8)?.sqrt()?.recip()?;
            y = y.broadcast_mul(&d.unsqueeze(2)?.unsqueeze(3)?)?;
        }
        y = y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?;
        if self.activate {
            y = (lrelu(&y)? * LRELU_GAIN)?;
        }
        Ok(y)
    }
}

/// (out, in) bilinear interpolation matrix for resizing a 1-D signal of
/// length `n` by `factor` with half-pixel alignment and edge clamping.
pub fn bilinear_matrix(n: usize, factor: usize) -> Vec<f64> {
    let m = n * factor;
    let mut a = vec![0.0; m * n];
    for o in 0..m {
        let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = src - i0 as f64;
        a[o * n + i0] += 1.0 - f;
        a[o * n + i1] += f;
    }
    a
}

/// Bilinear upsampling of (B, C, H, W) by an integer factor.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let ah = tensor_from(bilinear_matrix(h, factor), (h * factor, h), x.dtype())?;
    let aw = tensor_from(bilinear_matrix(w, factor), (w * factor, w), x.dtype())?;
    let flat = x.reshape((b * c, h, w))?;
    let rows = ah.broadcast_left(b * c)?.matmul(&flat)?;
    let out = rows.matmul(&aw.t()?.broadcast_left(b * c)?)?;
    Ok(out.reshape((b, c, h * factor, w * factor))?)
}

/// Sparse interpolation taps: output row `n` is
/// `sum_k weight[n*K + k] * table[index[n*K + k]]`.
#[derive(Debug, Clone, Default)]
pub struct Taps {
    pub index: Vec<u32>,
    pub weight: Vec<f64>,
    pub per_point: usize,
}

impl Taps {
    pub fn with_capacity(points: usize, per_point: usize) -> Self {
        Self {
            index: Vec::with_capacity(points * per_point),
            weight: Vec::with_capacity(points * per_point),
            per_point,
        }
    }

    pub fn points(&self) -> usize {
        if self.per_point == 0 {
            0
        } else {
            self.index.len() / self.per_point
        }
    }

    pub fn push(&mut self, index: usize, weight: f64) {
        self.index.push(index as u32);
        self.weight.push(weight);
    }

    /// Host-side evaluation over a row-major (rows, C) table.
    pub fn apply_host(&self, table: &[f64], channels: usize) -> Vec<f64> {
        let n = self.points();
        let mut out = vec![0.0; n * channels];
        for p in 0..n {
            let row = &mut out[p * channels..(p + 1) * channels];
            for k in 0..self.per_point {
                let t = p * self.per_point + k;
                let w = self.weight[t];
                let src = &table[self.index[t] as usize * channels..][..channels];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        out
    }
}

struct GatherSum {
    taps: Arc<Taps>,
    rows: usize,
}

fn gather_sum<T>(table: &[T], channels: usize, taps: &Taps) -> Vec<T>
where
    T: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = T> + num_from_f64::FromF64,
{
    let n = taps.points();
    let mut out = vec![T::default(); n * channels];
    for p in 0..n {
        let row = &mut out[p * channels..(p + 1) * channels];
        for k in 0..taps.per_point {
            let t = p * taps.per_point + k;
            let w = T::from_f64(taps.weight[t]);
            let src = &table[taps.index[t] as usize * channels..][..channels];
            for (o, &s) in row.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    out
}

fn scatter_sum<T>(grad: &[T], channels: usize, rows: usize, taps: &Taps) -> Vec<T>
where
    T: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = T> + num_from_f64::FromF64,
{
    let mut out = vec![T::default(); rows * channels];
    for p in 0..taps.points() {
        let g = &grad[p * channels..(p + 1) * channels];
        for k in 0..taps.per_point {
            let t = p * taps.per_point + k;
            let w = T::from_f64(taps.weight[t]);
            let dst = &mut out[taps.index[t] as usize * channels..][..channels];
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d += w * gv;
            }
        }
    }
    out
}

mod num_from_f64 {
    pub trait FromF64 {
        fn from_f64(v: f64) -> Self;
    }
    impl FromF64 for f32 {
        fn from_f64(v: f64) -> Self {
            v as f32
        }
    }
    impl FromF64 for f64 {
        fn from_f64(v: f64) -> Self {
            v
        }
    }
}

impl CustomOp1 for GatherSum {
    fn name(&self) -> &'static str {
        "gather-sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, channels) = layout.shape().dims2()?;
        if rows != self.rows {
            candle_core::bail!("gather-sum table has {rows} rows, taps expect {}", self.rows)
        }
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("gather-sum needs a contiguous table".into()))?;
        let shape = Shape::from((self.taps.points(), channels));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather_sum(&v[start..end], channels, &self.taps)),
            CpuStorage::F64(v) => CpuStorage::F64(gather_sum(&v[start..end], channels, &self.taps)),
            _ => candle_core::bail!("gather-sum supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (rows, channels) = arg.dims2()?;
        let g = grad_res.contiguous()?;
        let out = match arg.dtype() {
            DType::F32 => {
                let gv = g.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                Tensor::from_vec(scatter_sum(&gv, channels, rows, &self.taps), (rows, channels), arg.device())?
            }
            DType::F64 => {
                let gv = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                Tensor::from_vec(scatter_sum(&gv, channels, rows, &self.taps), (rows, channels), arg.device())?
            }
            dt => candle_core::bail!("gather-sum backward unsupported for {dt:?}"),
        };
        Ok(Some(out))
    }
}

/// Differentiable (w.r.t. `table`) sparse weighted gather: `table` is
/// (rows, C), the result is (points, C).
pub fn apply_taps(table: &Tensor, taps: Arc<Taps>) -> Result<Tensor> {
    let rows = table.dims2()?.0;
    if let Some(&bad) = taps.index.iter().find(|&&i| i as usize >= rows) {
        return Err(Error::Shape(format!("tap index {bad} outside table of {rows} rows")));
    }
    Ok(table.contiguous()?.apply_op1_arc(Arc::new(Box::new(GatherSum { taps, rows })))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_rows_sum_to_one_and_preserve_constants() {
        for (n, f) in [(4, 2), (5, 4), (8, 2)] {
            let a = bilinear_matrix(n, f);
            for row in a.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
        let x = Tensor::full(0.5f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        assert!(to_f64_vec(&y).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gather_sum_matches_host_and_backprops() {
        let table: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let mut taps = Taps::with_capacity(2, 2);
        taps.push(0, 0.25);
        taps.push(3, 0.75);
        taps.push(5, 1.0);
        taps.push(5, 1.0);
        let taps = Arc::new(taps);
        let var = Var::from_tensor(&tensor_from(table.clone(), (6, 2), DType::F64).unwrap()).unwrap();
        let out = apply_taps(var.as_tensor(), taps.clone()).unwrap();
        assert_eq!(to_f64_vec(&out).unwrap(), taps.apply_host(&table, 2));
        let grads = out.sum_all().unwrap().backward().unwrap();
        let g = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
        assert_eq!(g, vec![0.25, 0.25, 0., 0., 0., 0., 0.75, 0.75, 0., 0., 2.0, 2.0]);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (k, pad) in [(3, 1), (1, 0), (3, 0)] {
            let xv: Vec<f64> = (0..2 * 3 * 5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..4 * 3 * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = tensor_from(xv.clone(), (2, 3, 5, 6), DType::F64).unwrap();
            let w = tensor_from(wv.clone(), (4, 3, k, k), DType::F64).unwrap();
            let y = conv2d(&x, &w, pad).unwrap();
            let (oh, ow) = (5 + 2 * pad + 1 - k, 6 + 2 * pad + 1 - k);
            assert_eq!(y.dims(), &[2, 4, oh, ow]);
            let got = to_f64_vec(&y).unwrap();
            for b in 0..2 {
                for o in 0..4 {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                for u in 0..k {
                                    for v in 0..k {
                                        let (yy, xx) = (i as isize + u as isize - pad as isize, j as isize + v as isize - pad as isize);
                                        if (0..5).contains(&yy) && (0..6).contains(&xx) {
                                            acc += wv[((o * 3 + c) * k + u) * k + v] * xv[((b * 3 + c) * 5 + yy as usize) * 6 + xx as usize];
                                        }
                                    }
                                }
                            }
                            let idx = ((b * 4 + o) * oh + i) * ow + j;
                            assert!((got[idx] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batched_conv_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xv: Vec<f64> = (0..3 * 2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..4 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tensor_from(xv, (3, 2, 5, 5), DType::F64).unwrap();
        let xvar = Var::from_tensor(&x).unwrap();
        let loss = |x: &Tensor, w: &Tensor| conv2d(x, w, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let var = Var::from_tensor(&tensor_from(wv.clone(), (4, 2, 3, 3), DType::F64).unwrap()).unwrap();
        let grads = loss(xvar.as_tensor(), var.as_tensor()).backward().unwrap();
        let g = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
        let gx = to_f64_vec(grads.get(xvar.as_tensor()).unwrap()).unwrap();
        let xv = to_f64_vec(&x).unwrap();
        let h = 1e-5;
        for i in (0..wv.len()).step_by(5) {
            let f = |d: f64| {
                let mut v = wv.clone();
                v[i] += d;
                scalar_f64(&loss(&x, &tensor_from(v, (4, 2, 3, 3), DType::F64).unwrap())).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "weight {i}: {fd} vs {}", g[i]);
        }
        for i in (0..xv.len()).step_by(7) {
            let f = |d: f64| {
                let mut v = xv.clone();
                v[i] += d;
                let w = tensor_from(wv.clone(), (4, 2, 3, 3), DType::F64).unwrap();
                scalar_f64(&loss(&tensor_from(v, (3, 2, 5, 5), DType::F64).unwrap(), &w)).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-6 * fd.abs().max(1.0), "input {i}: {fd} vs {}", gx[i]);
        }
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32);
        let lin = EqLinear::new(&mut store, "l", 3, 2, Some(0.0), 1.0, &mut rng).unwrap();
        let before = store.digest().unwrap();
        let x = tensor_from(vec![1.0, 2.0, 3.0], (1, 3), DType::F32).unwrap();
        let loss = lin.forward(&x).unwrap().sum_all().unwrap();
        let grads = collect_grads(&store, &loss.backward().unwrap());
        let mut adam = Adam::new(0.0, 0.0, 0.99);
        adam.step(&store, &grads).unwrap();
        assert_eq!(before, store.digest().unwrap());
    }

    #[test]
    fn deep_clone_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64);
        store.normal("a", &[2, 2], 1.0, &mut rng).unwrap();
        let copy = store.deep_clone().unwrap();
        let d = copy.digest().unwrap();
        store.get("a").unwrap().set(&Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(copy.digest().unwrap(), d);
        assert_ne!(store.digest().unwrap(), d);
    }
}
