use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::GanConfig;
use crate::error::{Error, Result};
use crate::nn::{lrelu, tensor_from, upsample_bilinear, EqConv2d, EqLinear, ParamStore, LRELU_GAIN};

/// Stacks (I+, up(I), up(I^m)) into the 7-channel discriminator input.
pub fn disc_input(image_hr: &Tensor, image_lr: &Tensor, mask_lr: &Tensor) -> Result<Tensor> {
    let (b, _, big, _) = image_hr.dims4()?;
    let (bl, _, small, _) = image_lr.dims4()?;
    if bl != b || small == 0 || big % small != 0 || mask_lr.dims4()? != (b, 1, small, small) {
        return Err(Error::Shape(format!(
            "discriminator input: hr {:?}, lr {:?}, mask {:?}",
            image_hr.dims(),
            image_lr.dims(),
            mask_lr.dims()
        )));
    }
    let f = big / small;
    let (up_i, up_m) = if f == 1 {
        (image_lr.clone(), mask_lr.clone())
    } else {
        (upsample_bilinear(image_lr, f)?, upsample_bilinear(mask_lr, f)?)
    };
    Ok(Tensor::cat(&[image_hr, &up_i, &up_m], 1)?)
}

/// Discriminator input for real data: the low-resolution pair is the box
/// downsample of the full-resolution image and mask.
pub fn real_disc_input(image_hr: &Tensor, mask_hr: &Tensor, factor: usize) -> Result<Tensor> {
    let lr = image_hr.avg_pool2d(factor)?;
    let mlr = mask_hr.avg_pool2d(factor)?;
    disc_input(image_hr, &lr, &mlr)
}

/// Convolutional trunk to a feature vector phi; the logit is
/// `fc(phi) + <phi, cmap(label)> / sqrt(F)`.
#[derive(Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    from_input: EqConv2d,
    blocks: Vec<EqConv2d>,
    fc: EqLinear,
    out: EqLinear,
    cmap: EqLinear,
    resolution: usize,
    label_dim: usize,
    features: usize,
}

impl Discriminator {
    pub fn new(cfg: &GanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(cfg.dtype);
        let ch = cfg.d_channels;
        let from_input = EqConv2d::new(&mut store, "d.from_input", 7, ch, 1, &mut rng)?;
        let mut blocks = Vec::new();
        let mut res = cfg.output_resolution();
        while res > 4 {
            let i = blocks.len();
            blocks.push(EqConv2d::new(&mut store, &format!("d.block{i}"), ch, ch, 3, &mut rng)?);
            res /= 2;
        }
        let fc = EqLinear::new(&mut store, "d.fc", ch * 16, cfg.d_features, Some(0.0), 1.0, &mut rng)?;
        let out = EqLinear::new(&mut store, "d.out", cfg.d_features, 1, Some(0.0), 1.0, &mut rng)?;
        let cmap = EqLinear::new(&mut store, "d.cmap", cfg.label_dim(), cfg.d_features, None, 1.0, &mut rng)?;
        Ok(Self {
            store,
            from_input,
            blocks,
            fc,
            out,
            cmap,
            resolution: cfg.output_resolution(),
            label_dim: cfg.label_dim(),
            features: cfg.d_features,
        })
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim
    }

    pub fn label_tensor(&self, labels: &[Vec<f64>]) -> Result<Tensor> {
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| l.len() != self.label_dim) {
            return Err(Error::Shape(format!(
                "label {i} has {} dims, discriminator expects {}",
                l.len(),
                self.label_dim
            )));
        }
        let flat: Vec<f64> = labels.iter().flatten().copied().collect();
        tensor_from(flat, (labels.len(), self.label_dim), self.store.dtype())
    }

    /// Logits (B,) for a (B, 7, R, R) input and (B, label_dim) labels.
    pub fn forward(&self, x: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != 7 || h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!(
                "discriminator expects (B, 7, {r}, {r}), got {:?}",
                x.dims(),
                r = self.resolution
            )));
        }
        if labels.dims2()? != (b, self.label_dim) {
            return Err(Error::Shape(format!(
                "labels {:?} for batch {b}, expected width {}",
                labels.dims(),
                self.label_dim
            )));
        }
        let mut h = (lrelu(&self.from_input.forward(x)?)? * LRELU_GAIN)?;
        for block in &self.blocks {
            h = (lrelu(&block.forward(&h)?)? * LRELU_GAIN)?;
            h = h.avg_pool2d(2)?;
        }
        let phi = (lrelu(&self.fc.forward(&h.flatten_from(1)?)?)? * LRELU_GAIN)?;
        let base = self.out.forward(&phi)?.squeeze(1)?;
        let proj = (phi * self.cmap.forward(labels)?)?.sum(1)?;
        Ok((base + (proj / (self.features as f64).sqrt())?)?)
    }

    pub fn logits(&self, x: &Tensor, labels: &[Vec<f64>]) -> Result<Tensor> {
        self.forward(x, &self.label_tensor(labels)?)
    }
}
