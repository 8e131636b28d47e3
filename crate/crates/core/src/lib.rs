//! A desk-scale laboratory for semantic-conditional 3D-aware GANs.
//!
//! The crate covers the whole loop: a procedural multi-view head dataset
//! with shared front-view conditions ([`synthdata`]), cameras ([`camera`]),
//! plane-based neural fields ([`neural_field`]), differentiable volume
//! rendering ([`renderer`]), the conditional GAN with its loss suite
//! ([`gan`]), conditioning strategies ([`conditioning`]), evaluation
//! metrics ([`metrics`]), pivotal tuning inversion ([`inversion`]) and the
//! experiment harness ([`harness`]).

pub mod camera;
pub mod conditioning;
pub mod error;
pub mod gan;
pub mod harness;
pub mod inversion;
pub mod metrics;
pub mod neural_field;
pub mod nn;
pub mod raster;
pub mod renderer;
pub mod synthdata;

pub use camera::{CameraLabel, CameraPose, PoseDistribution};
pub use conditioning::{ConditionEmbedder, ConditionStrategy, SemanticCondition, StrategyKind};
pub use error::{Error, Result};
pub use synthdata::{Dataset, MultiViewRecord, SubjectSpec};
