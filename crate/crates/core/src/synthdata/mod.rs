//! Procedural multi-view head dataset and the data-pipeline decision rules.

mod io;
mod pipeline;
mod raycast;
mod record;
mod subject;

pub use io::{dataset_read, dataset_write, Dataset, DatasetMeta, MANIFEST};
pub use pipeline::{
    quality_gate, select_front_candidate, yaw_gate, PipelineAction, PipelineVerdict,
    SelectionMode, DISCARD_BELOW, KEEP_ABOVE, MAX_FRONTAL_YAW_DEG,
};
pub use raycast::{jittered, render_ground_truth};
pub use record::{build_record, record_poses, MultiViewRecord, RecordConfig, View, ViewTag};
pub use subject::{generate_subject, Accessory, AccessoryKind, FaceFeature, SubjectSpec};

use crate::camera::PoseDistribution;
use crate::conditioning::ConditionEmbedder;
use crate::error::Result;

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub views: usize,
    pub jitter: f64,
    pub seed: u64,
    pub resolution: usize,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub normalize: bool,
    pub poses: PoseDistribution,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 500,
            views: 8,
            jitter: 0.0,
            seed: 0,
            resolution: 32,
            embed_dim: crate::conditioning::DEFAULT_EMBED_DIM,
            embed_seed: crate::conditioning::DEFAULT_EMBED_SEED,
            normalize: true,
            poses: PoseDistribution::full_sphere(),
        }
    }
}

impl SynthConfig {
    pub fn embedder(&self) -> Result<ConditionEmbedder> {
        ConditionEmbedder::new(self.embed_seed, self.embed_dim, self.normalize)
    }

    /// Seed of the `k`-th subject.
    pub fn subject_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(k as u64)
    }
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let embedder = cfg.embedder()?;
    let rc = RecordConfig {
        resolution: cfg.resolution,
        n_views: cfg.views,
        poses: cfg.poses,
        jitter_level: cfg.jitter,
    };
    let records = (0..cfg.subjects)
        .map(|k| build_record(&generate_subject(cfg.subject_seed(k)), &rc, &embedder))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta {
            resolution: cfg.resolution,
            embed_dim: cfg.embed_dim,
            embed_seed: cfg.embed_seed,
            normalized: cfg.normalize,
        },
        records,
    })
}
