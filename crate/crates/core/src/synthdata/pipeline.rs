//! Data-pipeline decision rules: the image-quality gate, the frontal yaw
//! gate and front-view candidate selection.

use crate::camera::CameraPose;
use crate::error::{Error, Result};

/// Scores strictly above this are kept as-is.
pub const KEEP_ABOVE: f64 = 60.0;
/// Scores strictly below this are discarded.
pub const DISCARD_BELOW: f64 = 35.0;
/// Largest absolute yaw, in degrees, accepted as a frontal source image.
pub const MAX_FRONTAL_YAW_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineAction {
    Keep,
    Enhance,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineVerdict {
    pub action: PipelineAction,
    pub reason: String,
}

pub fn quality_gate(score: f64) -> Result<PipelineVerdict> {
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("quality score {score}")));
    }
    let (action, reason) = if score > KEEP_ABOVE {
        (PipelineAction::Keep, format!("score {score} > {KEEP_ABOVE}"))
    } else if score < DISCARD_BELOW {
        (PipelineAction::Discard, format!("score {score} < {DISCARD_BELOW}"))
    } else {
        (
            PipelineAction::Enhance,
            format!("score {score} in [{DISCARD_BELOW}, {KEEP_ABOVE}], needs super-resolution"),
        )
    };
    Ok(PipelineVerdict { action, reason })
}

/// True when the pose is close enough to frontal (|yaw| <= 10 degrees).
pub fn yaw_gate(pose: &CameraPose) -> bool {
    pose.yaw.abs().to_degrees() <= MAX_FRONTAL_YAW_DEG + 1e-9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionMode {
    /// Highest cosine similarity to the reference wins.
    #[default]
    MostSimilar,
    /// Literal reading: lowest cosine similarity wins.
    LeastSimilar,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Index of the candidate embedding closest (by cosine) to the reference.
/// Ties go to the lowest index.
pub fn select_front_candidate<E: AsRef<[f64]>>(
    candidates: &[E],
    reference: &[f64],
    mode: SelectionMode,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("no front-view candidates"));
    }
    let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    if zero(reference) {
        return Err(Error::invalid("reference embedding has zero norm"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let c = c.as_ref();
        if c.len() != reference.len() {
            return Err(Error::Shape(format!(
                "candidate {i} has {} dims, reference {}",
                c.len(),
                reference.len()
            )));
        }
        if zero(c) {
            return Err(Error::invalid(format!("candidate {i} has zero norm")));
        }
        let s = match mode {
            SelectionMode::MostSimilar => cosine(c, reference),
            SelectionMode::LeastSimilar => -cosine(c, reference),
        };
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    Ok(best.expect("non-empty").0)
}
