use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raycast::render_ground_truth;
use super::subject::SubjectSpec;
use crate::camera::{sample_pose, CameraLabel, CameraPose, PoseDistribution, PoseKind};
use crate::conditioning::{ConditionEmbedder, SemanticCondition};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTag {
    Front,
    Left,
    Right,
    Back,
    Random,
}

impl ViewTag {
    pub fn name(&self) -> &'static str {
        match self {
            ViewTag::Front => "front",
            ViewTag::Left => "left",
            ViewTag::Right => "right",
            ViewTag::Back => "back",
            ViewTag::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ViewTag::Front,
            ViewTag::Left,
            ViewTag::Right,
            ViewTag::Back,
            ViewTag::Random,
        ]
        .into_iter()
        .find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub mask: Mask,
    pub camera: CameraLabel,
    pub tag: ViewTag,
}

/// One subject's multi-view image set with its shared condition.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewRecord {
    pub subject_id: u64,
    pub views: Vec<View>,
    pub condition: SemanticCondition,
    pub jitter_level: f64,
}

impl MultiViewRecord {
    pub fn front_view(&self) -> Result<&View> {
        self.views
            .iter()
            .find(|v| v.tag == ViewTag::Front)
            .ok_or_else(|| Error::invalid(format!("subject {} has no front view", self.subject_id)))
    }

    /// Checks the record invariants: a front view exists and every mask
    /// matches its image.
    pub fn validate(&self) -> Result<()> {
        self.front_view()?;
        for (k, v) in self.views.iter().enumerate() {
            let (h, w, _) = v.image.dim();
            if v.mask.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "subject {} view {k}: mask {:?} vs image {h}x{w}",
                    self.subject_id,
                    v.mask.dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordConfig {
    pub resolution: usize,
    pub n_views: usize,
    pub poses: PoseDistribution,
    pub jitter_level: f64,
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            n_views: 8,
            poses: PoseDistribution::full_sphere(),
            jitter_level: 0.0,
        }
    }
}

/// Poses for the non-front views. For the full-sphere distribution the yaw
/// circle is split into `n_views` equal sectors; the front view owns sector 0
/// and every other view is drawn uniformly inside its own sector, which keeps
/// the dataset's yaw histogram balanced.
pub fn record_poses(seed: u64, cfg: &RecordConfig) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x51);
    let dist = &cfg.poses;
    let front = CameraPose::new(0.0, 0.0, dist.radius, dist.fov).expect("validated framing");
    let mut poses = vec![front];
    let n = cfg.n_views;
    for k in 1..n {
        let pose = match dist.kind {
            PoseKind::FullSphere => {
                let sector = 2.0 * PI / n as f64;
                let yaw = k as f64 * sector + rng.gen_range(-0.5 * sector..0.5 * sector);
                let (lo, hi) = dist.pitch_range;
                let pitch = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                CameraPose::new(yaw, pitch, dist.radius, dist.fov).expect("validated framing")
            }
            _ => sample_pose(dist, &mut rng),
        };
        poses.push(pose);
    }
    poses
}

pub(crate) fn view_seed(subject_seed: u64, view: usize) -> u64 {
    subject_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(view as u64 + 1)
}

pub fn build_record(
    spec: &SubjectSpec,
    cfg: &RecordConfig,
    embedder: &ConditionEmbedder,
) -> Result<MultiViewRecord> {
    if cfg.n_views < 2 {
        return Err(Error::invalid(format!(
            "a record needs at least 2 views, got {}",
            cfg.n_views
        )));
    }
    cfg.poses.validate()?;
    let poses = record_poses(spec.seed, cfg);
    let mut views = Vec::with_capacity(poses.len());
    for (k, pose) in poses.iter().enumerate() {
        let (image, mask) = render_ground_truth(
            spec,
            pose,
            cfg.resolution,
            cfg.jitter_level,
            view_seed(spec.seed, k),
        )?;
        views.push(View {
            image,
            mask,
            camera: pose.to_label(),
            tag: if k == 0 { ViewTag::Front } else { ViewTag::Random },
        });
    }
    let condition = embedder.embed(&views[0].image)?;
    Ok(MultiViewRecord {
        subject_id: spec.seed,
        views,
        condition,
        jitter_level: cfg.jitter_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{label_to_pose, yaw_histogram};
    use crate::synthdata::generate_subject;

    fn embedder() -> ConditionEmbedder {
        ConditionEmbedder::new(3, 32, true).unwrap()
    }

    #[test]
    fn record_shares_condition() {
        let rec = build_record(
            &generate_subject(1),
            &RecordConfig {
                n_views: 4,
                ..Default::default()
            },
            &embedder(),
        )
        .unwrap();
        assert_eq!(rec.views.len(), 4);
        rec.validate().unwrap();
        assert_eq!(rec.views[0].camera, CameraPose::front().to_label());
    }

    #[test]
    fn different_hair_gives_different_condition() {
        let a = generate_subject(9);
        let mut b = a.clone();
        b.hair_color = [1.0 - a.hair_color[0], a.hair_color[1], 0.5];
        let cfg = RecordConfig {
            n_views: 2,
            ..Default::default()
        };
        let ra = build_record(&a, &cfg, &embedder()).unwrap();
        let rb = build_record(&b, &cfg, &embedder()).unwrap();
        assert!(ra.condition.l2_distance(&rb.condition) > 0.0);
    }

    #[test]
    fn jittered_condition_comes_from_jittered_front() {
        let spec = generate_subject(12);
        let e = embedder();
        let clean = build_record(
            &spec,
            &RecordConfig {
                n_views: 2,
                ..Default::default()
            },
            &e,
        )
        .unwrap();
        let noisy = build_record(
            &spec,
            &RecordConfig {
                n_views: 2,
                jitter_level: 0.3,
                ..Default::default()
            },
            &e,
        )
        .unwrap();
        assert_ne!(clean.views[0].image, noisy.views[0].image);
        assert_ne!(clean.views[1].image, noisy.views[1].image);
        assert_eq!(noisy.condition, e.embed(&noisy.views[0].image).unwrap());
        assert_ne!(noisy.condition, clean.condition);
    }

    #[test]
    fn rejects_single_view() {
        let cfg = RecordConfig {
            n_views: 1,
            ..Default::default()
        };
        assert!(build_record(&generate_subject(0), &cfg, &embedder()).is_err());
    }

    #[test]
    fn unjittered_views_rerender_exactly() {
        let spec = generate_subject(77);
        let cfg = RecordConfig {
            n_views: 3,
            resolution: 16,
            ..Default::default()
        };
        let rec = build_record(&spec, &cfg, &embedder()).unwrap();
        for v in &rec.views {
            let pose = label_to_pose(&v.camera).unwrap();
            let (img, mask) = render_ground_truth(&spec, &pose, 16, 0.0, 999).unwrap();
            let diff = img
                .iter()
                .zip(v.image.iter())
                .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff < 1e-5, "re-render differs by {diff}");
            assert_eq!(mask.dim(), v.mask.dim());
        }
    }

    #[test]
    fn stratified_poses_balance_yaw() {
        let cfg = RecordConfig::default();
        let yaws = (0..500u64).flat_map(|s| record_poses(s, &cfg).into_iter().map(|p| p.yaw));
        let hist = yaw_histogram(yaws, 8);
        let max = *hist.iter().max().unwrap() as f64;
        let min = *hist.iter().min().unwrap() as f64;
        assert!(max / min <= 1.3, "{hist:?}");
    }
}
