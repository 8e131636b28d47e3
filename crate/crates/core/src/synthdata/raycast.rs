//! Analytic ground-truth rasterizer: rays against a head ellipsoid and a
//! shoulder ellipsoid, coloured procedurally and lit from a fixed world
//! direction so every view shows the same 3D scene.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::subject::{AccessoryKind, Rgb, SubjectSpec};
use crate::camera::{ray_through, CameraPose};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask, BACKGROUND};

const HEAD_CENTER: [f64; 3] = [0.0, 0.12, 0.0];
const SHOULDER_AXES: [f64; 3] = [0.85, 0.18, 0.42];
const SHOULDER_Y: f64 = -0.80;
const SUPERSAMPLE: usize = 2;

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Nearest positive hit distance of a ray with an axis-aligned ellipsoid.
fn hit_ellipsoid(o: [f64; 3], d: [f64; 3], center: [f64; 3], axes: [f64; 3]) -> Option<f64> {
    let oc = [
        (o[0] - center[0]) / axes[0],
        (o[1] - center[1]) / axes[1],
        (o[2] - center[2]) / axes[2],
    ];
    let ds = [d[0] / axes[0], d[1] / axes[1], d[2] / axes[2]];
    let a = dot(ds, ds);
    let b = 2.0 * dot(oc, ds);
    let c = dot(oc, oc) - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

fn shade(color: Rgb, normal: [f64; 3]) -> Rgb {
    let light = unit([0.35, 0.6, 0.7]);
    let k = 0.6 + 0.4 * dot(normal, light).max(0.0);
    [color[0] * k, color[1] * k, color[2] * k]
}

fn head_color(spec: &SubjectSpec, dir: [f64; 3]) -> Rgb {
    let hair_axis = unit([0.0, 1.0, -0.55]);
    let angle = dot(dir, hair_axis).clamp(-1.0, 1.0).acos();
    let mut color = if angle <= spec.hair_coverage * std::f64::consts::PI {
        spec.hair_color
    } else {
        spec.skin_color
    };
    for f in &spec.face_features {
        if dot(dir, f.direction).clamp(-1.0, 1.0).acos() < f.radius {
            color = f.color;
        }
    }
    if let Some(acc) = &spec.accessory {
        let on = match acc.kind {
            AccessoryKind::Cap => dir[1] > 0.6,
            AccessoryKind::Band => (dir[1] - 0.45).abs() < 0.09,
        };
        if on {
            color = acc.color;
        }
    }
    color
}

/// Colour seen along one ray, or `None` for background.
fn trace(spec: &SubjectSpec, o: [f64; 3], d: [f64; 3]) -> Option<Rgb> {
    let axes = spec.head_axes;
    let shoulder_center = [0.0, SHOULDER_Y + spec.shoulder_offset, -0.05];
    let head = hit_ellipsoid(o, d, HEAD_CENTER, axes);
    let body = hit_ellipsoid(o, d, shoulder_center, SHOULDER_AXES);
    let (t, on_head) = match (head, body) {
        (Some(h), Some(b)) if b < h => (b, false),
        (Some(h), _) => (h, true),
        (None, Some(b)) => (b, false),
        (None, None) => return None,
    };
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let (center, ax) = if on_head {
        (HEAD_CENTER, axes)
    } else {
        (shoulder_center, SHOULDER_AXES)
    };
    let local = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    let normal = unit([
        local[0] / (ax[0] * ax[0]),
        local[1] / (ax[1] * ax[1]),
        local[2] / (ax[2] * ax[2]),
    ]);
    let base = if on_head {
        head_color(spec, unit([local[0] / ax[0], local[1] / ax[1], local[2] / ax[2]]))
    } else {
        let s = spec.skin_color;
        let h = spec.hair_color;
        [
            0.35 * s[0] + 0.35 * h[2] + 0.1,
            0.35 * s[1] + 0.35 * h[0] + 0.1,
            0.35 * s[2] + 0.35 * h[1] + 0.1,
        ]
    };
    Some(shade(base, normal))
}

/// Per-view perturbed copy of a spec; models cross-view inconsistency of
/// independently generated views.
pub fn jittered(spec: &SubjectSpec, jitter_level: f64, jitter_seed: u64) -> SubjectSpec {
    if jitter_level == 0.0 {
        return spec.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let noise = Normal::new(0.0, jitter_level).expect("finite jitter");
    let mut n = || noise.sample(&mut rng);
    let color = |c: Rgb, n: &mut dyn FnMut() -> f64| -> Rgb {
        [
            (c[0] + n()).clamp(0.0, 1.0),
            (c[1] + n()).clamp(0.0, 1.0),
            (c[2] + n()).clamp(0.0, 1.0),
        ]
    };
    let mut out = spec.clone();
    out.skin_color = color(out.skin_color, &mut n);
    out.hair_color = color(out.hair_color, &mut n);
    for f in &mut out.face_features {
        f.color = color(f.color, &mut n);
        let d = f.direction;
        let mut moved = unit([d[0] + n(), d[1] + n(), d[2] + n()]);
        if moved[2] < 0.05 {
            moved[2] = 0.05;
            moved = unit(moved);
        }
        f.direction = moved;
    }
    if let Some(acc) = &mut out.accessory {
        acc.color = color(acc.color, &mut n);
    }
    out
}

/// Renders one view of a subject with 2x2 supersampling.
pub fn render_ground_truth(
    spec: &SubjectSpec,
    pose: &CameraPose,
    resolution: usize,
    jitter_level: f64,
    jitter_seed: u64,
) -> Result<(Image, Mask)> {
    for v in [pose.yaw, pose.pitch, pose.radius, pose.fov] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("pose {pose:?}")));
        }
    }
    if resolution < 8 {
        return Err(Error::invalid(format!(
            "render resolution must be >= 8, got {resolution}"
        )));
    }
    if !(jitter_level >= 0.0 && jitter_level.is_finite()) {
        return Err(Error::invalid(format!(
            "jitter level must be finite and >= 0, got {jitter_level}"
        )));
    }
    let view_spec = jittered(spec, jitter_level, jitter_seed);
    let mut image = Image::zeros((resolution, resolution, 3));
    let mut mask = Mask::zeros((resolution, resolution));
    let res = resolution as f64;
    let ss = SUPERSAMPLE as f64;
    let weight = 1.0 / (ss * ss);
    for i in 0..resolution {
        for j in 0..resolution {
            let mut acc = [0.0f64; 3];
            let mut cover = 0.0;
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let u = (j as f64 + (sj as f64 + 0.5) / ss) / res;
                    let v = (i as f64 + (si as f64 + 0.5) / ss) / res;
                    let (o, d) = ray_through(pose, u, v);
                    let c = match trace(&view_spec, o, d) {
                        Some(c) => {
                            cover += weight;
                            c
                        }
                        None => BACKGROUND.map(f64::from),
                    };
                    for k in 0..3 {
                        acc[k] += weight * c[k];
                    }
                }
            }
            for k in 0..3 {
                image[(i, j, k)] = acc[k].clamp(0.0, 1.0) as f32;
            }
            mask[(i, j)] = cover as f32;
        }
    }
    Ok((image, mask))
}
