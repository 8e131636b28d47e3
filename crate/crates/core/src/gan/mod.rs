//! The conditional 3D-aware GAN: generator (mapping, plane synthesis,
//! rendering), projection discriminator, negative-pair shuffling, losses,
//! training state and checkpoints.

mod checkpoint;
mod discriminator;
pub(crate) mod generator;
mod pairs;
mod train;

pub use checkpoint::{checkpoint_hash, load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest};
pub use discriminator::{disc_input, real_disc_input, Discriminator};
pub use generator::{swap_conditions, Generator, Mapping, Synthesis};
pub use pairs::{make_negative_pairs, NegativeMode, NegativePairs};
pub use train::{
    loss_vicico, r1_penalty, ConditionTable, StepScalars, TrainBatch, TrainState,
};

use candle_core::DType;

use crate::camera::LABEL_DIM;
use crate::conditioning::ConditionStrategy;
use crate::error::{Error, Result};
use crate::neural_field::PlaneLayout;
use crate::renderer::RenderConfig;

/// Architecture and optimisation settings shared by generator,
/// discriminator and the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct GanConfig {
    pub strategy: ConditionStrategy,
    pub layout: PlaneLayout,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub synth_channels: usize,
    pub decoder_hidden: usize,
    pub upsampler_hidden: usize,
    pub render: RenderConfig,
    pub d_channels: usize,
    /// Width of the discriminator feature vector used by the projection.
    pub d_features: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_r1: f64,
    pub r1_interval: u64,
    pub vicico: bool,
    pub lambda_vicico: f64,
    pub p_swap: f64,
    pub dtype: DType,
}

impl GanConfig {
    /// Small defaults for the given strategy; `p_swap` follows the
    /// strategy (0.5 for view-dependent conditions, 0 otherwise).
    pub fn new(strategy: ConditionStrategy, layout: PlaneLayout, render: RenderConfig) -> Self {
        let p_swap = if strategy.kind.is_view_dependent() { 0.5 } else { 0.0 };
        Self {
            strategy,
            layout,
            z_dim: 64,
            w_dim: 64,
            mapping_layers: 2,
            synth_channels: 32,
            decoder_hidden: 32,
            upsampler_hidden: 16,
            render,
            d_channels: 32,
            d_features: 64,
            lr_g: 2.5e-3,
            lr_d: 2.5e-3,
            beta1: 0.0,
            beta2: 0.99,
            lambda_r1: 1.0,
            r1_interval: 16,
            vicico: false,
            lambda_vicico: 1.0,
            p_swap,
            dtype: DType::F32,
        }
    }

    /// Width of the semantic part of the discriminator label.
    pub fn semantic_label_dim(&self) -> usize {
        if self.strategy.kind.is_semantic() {
            self.strategy.dimension
        } else {
            0
        }
    }

    /// Discriminator label width: camera label plus semantic condition.
    pub fn label_dim(&self) -> usize {
        LABEL_DIM + self.semantic_label_dim()
    }

    pub fn output_resolution(&self) -> usize {
        self.render.output_resolution()
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = self.layout.validate() {
            p.push(e.to_string());
        }
        if let Err(e) = self.render.validate() {
            p.push(e.to_string());
        }
        let r = self.layout.resolution;
        if r < 4 || !r.is_power_of_two() {
            p.push(format!("plane resolution must be a power of two >= 4, got {r}"));
        }
        let out = self.output_resolution();
        if out < 8 || !out.is_power_of_two() {
            p.push(format!("output resolution must be a power of two >= 8, got {out}"));
        }
        for (name, v) in [
            ("z_dim", self.z_dim),
            ("w_dim", self.w_dim),
            ("mapping_layers", self.mapping_layers),
            ("synth_channels", self.synth_channels),
            ("decoder_hidden", self.decoder_hidden),
            ("upsampler_hidden", self.upsampler_hidden),
            ("d_channels", self.d_channels),
            ("d_features", self.d_features),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_swap) {
            p.push(format!("p_swap must be in [0, 1], got {}", self.p_swap));
        }
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("lambda_r1", self.lambda_r1),
            ("lambda_vicico", self.lambda_vicico),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.r1_interval == 0 {
            p.push("r1_interval must be >= 1".into());
        }
        if !matches!(self.dtype, DType::F32 | DType::F64) {
            p.push(format!("dtype must be f32 or f64, got {:?}", self.dtype));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}
