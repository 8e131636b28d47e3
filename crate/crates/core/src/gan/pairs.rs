use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};

/// Which label component of a real batch gets shuffled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NegativeMode {
    CamOnly,
    SemOnly,
    Both,
}

impl NegativeMode {
    pub const ALL: [NegativeMode; 3] = [NegativeMode::CamOnly, NegativeMode::SemOnly, NegativeMode::Both];
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMode::CamOnly => "cam_only",
            NegativeMode::SemOnly => "sem_only",
            NegativeMode::Both => "both",
        })
    }
}

/// Source indices for the camera and semantic parts of each shuffled label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativePairs {
    pub mode: NegativeMode,
    pub cam_index: Vec<usize>,
    pub sem_index: Vec<usize>,
}

impl NegativePairs {
    /// Recombines split labels: element i gets camera `cam[cam_index[i]]`
    /// and semantic part `sem[sem_index[i]]`.
    pub fn apply(&self, cam: &[Vec<f64>], sem: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.cam_index
            .iter()
            .zip(&self.sem_index)
            .map(|(&a, &b)| {
                let mut l = cam[a].clone();
                l.extend_from_slice(&sem[b]);
                l
            })
            .collect()
    }
}

/// Uniform random derangement by rejection.
fn derangement(n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

pub fn make_negative_pairs(batch: usize, rng: &mut dyn RngCore) -> Result<NegativePairs> {
    if batch < 2 {
        return Err(Error::invalid(format!(
            "negative pairs need a batch of at least 2 (got {batch}); disable vicico for this run"
        )));
    }
    let mode = NegativeMode::ALL[rng.gen_range(0..3)];
    let identity: Vec<usize> = (0..batch).collect();
    let (cam_index, sem_index) = match mode {
        NegativeMode::CamOnly => (derangement(batch, rng), identity),
        NegativeMode::SemOnly => (identity, derangement(batch, rng)),
        NegativeMode::Both => {
            let a = derangement(batch, rng);
            (a, derangement(batch, rng))
        }
    };
    Ok(NegativePairs {
        mode,
        cam_index,
        sem_index,
    })
}
