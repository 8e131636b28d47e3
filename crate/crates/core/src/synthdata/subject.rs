use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceFeature {
    /// Unit direction from the head centre; always in the front hemisphere (z > 0).
    pub direction: [f64; 3],
    /// Angular radius of the patch, radians.
    pub radius: f64,
    pub color: Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessoryKind {
    Band,
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accessory {
    pub kind: AccessoryKind,
    pub color: Rgb,
}

/// Parameters of one procedural head.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSpec {
    pub seed: u64,
    pub head_axes: [f64; 3],
    pub skin_color: Rgb,
    pub hair_color: Rgb,
    /// Fraction of the full angular range covered by the hair cap.
    pub hair_coverage: f64,
    pub face_features: Vec<FaceFeature>,
    pub accessory: Option<Accessory>,
    pub shoulder_offset: f64,
}

impl SubjectSpec {
    /// Canonical little-endian byte encoding of every field.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(256);
        out.extend(self.seed.to_le_bytes());
        let mut put = |v: f64| out.extend(v.to_le_bytes());
        self.head_axes.iter().for_each(|&v| put(v));
        self.skin_color.iter().for_each(|&v| put(v));
        self.hair_color.iter().for_each(|&v| put(v));
        put(self.hair_coverage);
        put(self.face_features.len() as f64);
        for f in &self.face_features {
            f.direction.iter().for_each(|&v| put(v));
            put(f.radius);
            f.color.iter().for_each(|&v| put(v));
        }
        match &self.accessory {
            None => put(0.0),
            Some(a) => {
                put(match a.kind {
                    AccessoryKind::Band => 1.0,
                    AccessoryKind::Cap => 2.0,
                });
                a.color.iter().for_each(|&v| put(v));
            }
        }
        put(self.shoulder_offset);
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

fn rgb<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Rgb {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn generate_subject(seed: u64) -> SubjectSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let head_axes = [
        rng.gen_range(0.50..0.66),
        rng.gen_range(0.62..0.78),
        rng.gen_range(0.55..0.70),
    ];
    let tone = rng.gen_range(0.35..0.95);
    let skin_color = [
        tone,
        tone * rng.gen_range(0.62..0.82),
        tone * rng.gen_range(0.45..0.70),
    ];
    let hair_color = rgb(&mut rng, 0.02, 0.95);
    let hair_coverage = rng.gen_range(0.25..0.95);

    let eye_x = rng.gen_range(0.25..0.40);
    let eye_y = rng.gen_range(0.08..0.25);
    let eye_r = rng.gen_range(0.10..0.17);
    let eye_color = rgb(&mut rng, 0.0, 0.35);
    let mouth_y = rng.gen_range(0.30..0.45);
    let mouth_r = rng.gen_range(0.12..0.22);
    let mouth_color = [
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.05..0.35),
        rng.gen_range(0.10..0.40),
    ];
    let eye_z = (1.0f64 - eye_x * eye_x - eye_y * eye_y).sqrt();
    let face_features = vec![
        FaceFeature {
            direction: unit([eye_x, eye_y, eye_z]),
            radius: eye_r,
            color: eye_color,
        },
        FaceFeature {
            direction: unit([-eye_x, eye_y, eye_z]),
            radius: eye_r,
            color: eye_color,
        },
        FaceFeature {
            direction: unit([0.0, -mouth_y, (1.0 - mouth_y * mouth_y).sqrt()]),
            radius: mouth_r,
            color: mouth_color,
        },
    ];
    let roll: f64 = rng.gen();
    let accessory_color = rgb(&mut rng, 0.05, 0.95);
    let accessory = if roll < 0.25 {
        Some(Accessory {
            kind: AccessoryKind::Band,
            color: accessory_color,
        })
    } else if roll < 0.45 {
        Some(Accessory {
            kind: AccessoryKind::Cap,
            color: accessory_color,
        })
    } else {
        None
    };
    let shoulder_offset = rng.gen_range(-0.08..0.08);
    SubjectSpec {
        seed,
        head_axes,
        skin_color,
        hair_color,
        hair_coverage,
        face_features,
        accessory,
        shoulder_offset,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_bytes() {
        assert_eq!(generate_subject(0).to_bytes(), generate_subject(0).to_bytes());
    }

    #[test]
    fn distinct_seeds_distinct_specs() {
        let digests: HashSet<_> = (0..1000).map(|s| generate_subject(s).digest()).collect();
        assert!(digests.len() >= 999);
    }

    #[test]
    fn ranges_hold() {
        for seed in [7, 8, 9, 1234] {
            let s = generate_subject(seed);
            assert!((0.0..=1.0).contains(&s.hair_coverage));
            let mut colors = vec![s.skin_color, s.hair_color];
            colors.extend(s.face_features.iter().map(|f| f.color));
            colors.extend(s.accessory.iter().map(|a| a.color));
            for c in colors {
                assert!(c.iter().all(|v| (0.0..=1.0).contains(v)), "{c:?}");
            }
            for f in &s.face_features {
                assert!(f.direction[2] > 0.0);
            }
        }
    }
}
