use candle_core::{Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GanConfig;
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::neural_field::{Decoder, PlaneSet};
use crate::nn::{lrelu, tensor_from, upsample_bilinear, EqLinear, ModConv, ParamStore, LRELU_GAIN};
use crate::renderer::{render_full, PlaneField, RenderOutput, Upsampler};

fn normalize_2nd_moment(x: &Tensor) -> Result<Tensor> {
    let m = (x.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?.recip()?;
    Ok(x.broadcast_mul(&m)?)
}

/// Replaces each element's condition, with probability `p_swap`, by the
/// condition of a different batch element chosen uniformly.
pub fn swap_conditions(conds: &[Vec<f64>], p_swap: f64, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    let b = conds.len();
    (0..b)
        .map(|i| {
            if b >= 2 && p_swap > 0.0 && rng.gen::<f64>() < p_swap {
                let mut j = rng.gen_range(0..b - 1);
                if j >= i {
                    j += 1;
                }
                conds[j].clone()
            } else {
                conds[i].clone()
            }
        })
        .collect()
}

/// z (and condition) to w.
#[derive(Debug, Clone)]
pub struct Mapping {
    embed: Option<EqLinear>,
    layers: Vec<EqLinear>,
    z_dim: usize,
    cond_dim: usize,
}

impl Mapping {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &GanConfig, rng: &mut R) -> Result<Self> {
        let cond_dim = cfg.strategy.dimension;
        let embed = if cond_dim > 0 {
            Some(EqLinear::new(store, "map.embed", cond_dim, cfg.w_dim, Some(0.0), 1.0, rng)?)
        } else {
            None
        };
        let mut layers = Vec::new();
        let mut in_dim = cfg.z_dim + if cond_dim > 0 { cfg.w_dim } else { 0 };
        for l in 0..cfg.mapping_layers {
            layers.push(EqLinear::new(store, &format!("map.fc{l}"), in_dim, cfg.w_dim, Some(0.0), 0.01, rng)?);
            in_dim = cfg.w_dim;
        }
        Ok(Self {
            embed,
            layers,
            z_dim: cfg.z_dim,
            cond_dim,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// `z` (B, z_dim), `c` (B, cond_dim) or `None` when unconditional.
    pub fn forward(&self, z: &Tensor, c: Option<&Tensor>) -> Result<Tensor> {
        let (b, zd) = z.dims2()?;
        if zd != self.z_dim {
            return Err(Error::Shape(format!("z has {zd} dims, mapping expects {}", self.z_dim)));
        }
        let mut x = normalize_2nd_moment(z)?;
        match (&self.embed, c) {
            (Some(embed), Some(c)) => {
                let (cb, cd) = c.dims2()?;
                if cb != b || cd != self.cond_dim {
                    return Err(Error::Shape(format!(
                        "condition is {cb}x{cd}, expected {b}x{}",
                        self.cond_dim
                    )));
                }
                let e = normalize_2nd_moment(&embed.forward(c)?)?;
                x = Tensor::cat(&[&x, &e], 1)?;
            }
            (None, Some(c)) if c.dims2()?.1 > 0 => {
                return Err(Error::Shape(format!(
                    "unconditional mapping got a {}-dim condition",
                    c.dims2()?.1
                )));
            }
            (Some(_), None) => {
                return Err(Error::Shape(format!(
                    "mapping needs a {}-dim condition",
                    self.cond_dim
                )));
            }
            _ => {}
        }
        for layer in &self.layers {
            x = (lrelu(&layer.forward(&x)?)? * LRELU_GAIN)?;
        }
        Ok(x)
    }
}

/// Modulated-convolution pyramid from a learned 4x4 constant to the plane
/// stack.
#[derive(Debug, Clone)]
pub struct Synthesis {
    constant: Var,
    convs: Vec<ModConv>,
    /// Conv index after which the feature map is upsampled x2.
    upsample_after: Vec<bool>,
    to_planes: ModConv,
    layout: crate::neural_field::PlaneLayout,
}

impl Synthesis {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &GanConfig, rng: &mut R) -> Result<Self> {
        let ch = cfg.synth_channels;
        let constant = store.normal("synth.const", &[1, ch, 4, 4], 1.0, rng)?;
        let mut convs = vec![ModConv::new(store, "synth.conv0", cfg.w_dim, ch, ch, 3, true, true, rng)?];
        let mut upsample_after = vec![false];
        let mut res = 4;
        while res < cfg.layout.resolution {
            *upsample_after.last_mut().expect("non-empty") = true;
            res *= 2;
            for _ in 0..2 {
                let i = convs.len();
                convs.push(ModConv::new(store, &format!("synth.conv{i}"), cfg.w_dim, ch, ch, 3, true, true, rng)?);
                upsample_after.push(false);
            }
        }
        let out = cfg.layout.plane_count() * cfg.layout.channels;
        let to_planes = ModConv::new(store, "synth.to_planes", cfg.w_dim, ch, out, 1, false, false, rng)?;
        Ok(Self {
            constant,
            convs,
            upsample_after,
            to_planes,
            layout: cfg.layout,
        })
    }

    /// Number of per-layer latents consumed (w_plus length).
    pub fn num_ws(&self) -> usize {
        self.convs.len() + 1
    }

    /// `ws` (B, num_ws, w_dim).
    pub fn forward(&self, ws: &Tensor) -> Result<PlaneSet> {
        let (b, l, _) = ws.dims3()?;
        if l != self.num_ws() {
            return Err(Error::Shape(format!("w_plus has {l} entries, synthesis needs {}", self.num_ws())));
        }
        let (_, ch, h, w) = self.constant.dims4()?;
        let mut x = self.constant.as_tensor().broadcast_as((b, ch, h, w))?.contiguous()?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x, &ws.narrow(1, i, 1)?.squeeze(1)?)?;
            if self.upsample_after[i] {
                x = upsample_bilinear(&x, 2)?;
            }
        }
        let out = self.to_planes.forward(&x, &ws.narrow(1, l - 1, 1)?.squeeze(1)?)?;
        let lay = self.layout;
        let (p, c, r) = (lay.plane_count(), lay.channels, lay.resolution);
        let table = out
            .reshape((b, p, c, r, r))?
            .permute((0, 1, 3, 4, 2))?
            .contiguous()?
            .reshape((b * p * r * r, c))?;
        PlaneSet::new(lay, b, table)
    }
}

/// Mapping + synthesis + decoder + upsampler, all in one parameter store.
#[derive(Debug)]
pub struct Generator {
    pub cfg: GanConfig,
    pub store: ParamStore,
    pub mapping: Mapping,
    pub synthesis: Synthesis,
    pub decoder: Decoder,
    pub upsampler: Upsampler,
    seed: u64,
}

impl Generator {
    pub fn new(cfg: &GanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(cfg.dtype);
        let mapping = Mapping::new(&mut store, cfg, &mut rng)?;
        let synthesis = Synthesis::new(&mut store, cfg, &mut rng)?;
        let decoder = Decoder::new(&mut store, "decoder", cfg.layout.channels, cfg.decoder_hidden, &mut rng)?;
        let upsampler = Upsampler::new(
            &mut store,
            "upsampler",
            cfg.upsampler_hidden,
            cfg.render.upsample_factor,
            &mut rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            mapping,
            synthesis,
            decoder,
            upsampler,
            seed,
        })
    }

    /// Independent copy with its own parameter storage.
    pub fn duplicate(&self) -> Result<Self> {
        let g = Self::new(&self.cfg, self.seed)?;
        g.store.assign_from(&self.store)?;
        Ok(g)
    }

    pub fn num_ws(&self) -> usize {
        self.synthesis.num_ws()
    }

    pub fn cond_tensor(&self, conds: &[Vec<f64>]) -> Result<Option<Tensor>> {
        let d = self.mapping.cond_dim();
        if let Some((i, c)) = conds.iter().enumerate().find(|(_, c)| c.len() != d) {
            return Err(Error::Shape(format!(
                "condition {i} has {} dims, strategy {} needs {d}",
                c.len(),
                self.cfg.strategy.kind
            )));
        }
        if d == 0 {
            return Ok(None);
        }
        let flat: Vec<f64> = conds.iter().flatten().copied().collect();
        Ok(Some(tensor_from(flat, (conds.len(), d), self.cfg.dtype)?))
    }

    pub fn z_tensor(&self, z: &[Vec<f64>]) -> Result<Tensor> {
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        if flat.len() != z.len() * self.cfg.z_dim {
            return Err(Error::Shape(format!("z vectors must have {} dims", self.cfg.z_dim)));
        }
        tensor_from(flat, (z.len(), self.cfg.z_dim), self.cfg.dtype)
    }

    pub fn sample_z(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.cfg.z_dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }

    /// w for each (z, condition) pair; conditions are swapped first with
    /// probability `p_swap`. Returns w and the conditions actually used.
    pub fn map(
        &self,
        z: &[Vec<f64>],
        conds: &[Vec<f64>],
        p_swap: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, Vec<Vec<f64>>)> {
        if z.len() != conds.len() {
            return Err(Error::Shape(format!("{} z vectors, {} conditions", z.len(), conds.len())));
        }
        let used = swap_conditions(conds, p_swap, rng);
        let c = self.cond_tensor(&used)?;
        let w = self.mapping.forward(&self.z_tensor(z)?, c.as_ref())?;
        Ok((w, used))
    }

    /// Broadcast w (B, w_dim) to w_plus (B, num_ws, w_dim).
    pub fn w_plus(&self, w: &Tensor) -> Result<Tensor> {
        let (b, d) = w.dims2()?;
        Ok(w.unsqueeze(1)?.broadcast_as((b, self.num_ws(), d))?.contiguous()?)
    }

    pub fn synthesize(&self, w: &Tensor) -> Result<PlaneSet> {
        self.synthesis.forward(&self.w_plus(w)?)
    }

    pub fn render(
        &self,
        planes: &PlaneSet,
        poses: &[CameraPose],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<RenderOutput> {
        let field = PlaneField {
            planes,
            decoder: &self.decoder,
        };
        render_full(&field, &self.upsampler, poses, &self.cfg.render, rng)
    }

    /// Full path: mapping (no swap) -> synthesis -> rendering.
    pub fn generate(
        &self,
        z: &[Vec<f64>],
        conds: &[Vec<f64>],
        poses: &[CameraPose],
    ) -> Result<(RenderOutput, PlaneSet)> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (w, _) = self.map(z, conds, 0.0, &mut unused)?;
        let planes = self.synthesize(&w)?;
        let out = self.render(&planes, poses, None)?;
        Ok((out, planes))
    }

    /// Mean w over `n` mapped samples under a fixed condition.
    pub fn mean_w(&self, cond: &[f64], n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chunk = 512;
        let mut acc: Option<Tensor> = None;
        let mut done = 0;
        while done < n {
            let m = chunk.min(n - done);
            let z: Vec<Vec<f64>> = (0..m).map(|_| self.sample_z(&mut rng)).collect();
            let conds = vec![cond.to_vec(); m];
            let (w, _) = self.map(&z, &conds, 0.0, &mut rng)?;
            let s = w.sum_keepdim(0)?.detach();
            acc = Some(match acc {
                Some(a) => (a + s)?,
                None => s,
            });
            done += m;
        }
        let acc = acc.ok_or_else(|| Error::invalid("mean_w needs n >= 1"))?;
        Ok((acc / n as f64)?)
    }
}
