//! Camera poses on a sphere around the subject, the flat 25-value conditioning
//! label, pose distributions and pinhole ray generation.
//!
//! World frame: the subject faces +z, +y is up. A camera at yaw 0 / pitch 0
//! sits on the +z axis and looks at the origin. Camera frames follow the
//! OpenCV convention (x right, y down, z forward).

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Default camera distance from the origin, in scene units.
pub const DEFAULT_RADIUS: f64 = 2.7;
/// Default full field of view, radians.
pub const DEFAULT_FOV: f64 = 0.8;
/// Hard pitch limit; keeps the look-at frame away from the poles.
pub const MAX_PITCH: f64 = PI / 3.0;
/// Number of reals in a [`CameraLabel`].
pub const LABEL_DIM: usize = 25;

const ORTHO_TOL: f64 = 1e-9;

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Radians, 0 = front, positive moves toward the subject's left (+x).
    pub yaw: f64,
    pub pitch: f64,
    pub radius: f64,
    pub fov: f64,
}

impl CameraPose {
    /// Builds a validated pose; `yaw` is wrapped into (-pi, pi].
    pub fn new(yaw: f64, pitch: f64, radius: f64, fov: f64) -> Result<Self> {
        for (name, v) in [("yaw", yaw), ("pitch", pitch), ("radius", radius), ("fov", fov)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("camera {name} = {v}")));
            }
        }
        if radius <= 0.0 {
            return Err(Error::invalid(format!("camera radius must be > 0, got {radius}")));
        }
        if !(fov > 0.0 && fov < PI) {
            return Err(Error::invalid(format!("camera fov must lie in (0, pi), got {fov}")));
        }
        if pitch.abs() > MAX_PITCH + 1e-12 {
            return Err(Error::invalid(format!(
                "camera pitch {pitch} outside [-pi/3, pi/3]"
            )));
        }
        Ok(Self {
            yaw: wrap_angle(yaw),
            pitch,
            radius,
            fov,
        })
    }

    /// Front view (yaw 0, pitch 0) at the default framing.
    pub fn front() -> Self {
        Self::new(0.0, 0.0, DEFAULT_RADIUS, DEFAULT_FOV).expect("default framing is valid")
    }

    /// Pose at the default framing with angles given in degrees.
    pub fn from_degrees(yaw_deg: f64, pitch_deg: f64) -> Result<Self> {
        Self::new(
            yaw_deg.to_radians(),
            pitch_deg.to_radians(),
            DEFAULT_RADIUS,
            DEFAULT_FOV,
        )
    }

    pub fn position(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        Vector3::new(sy * cp, sp, cy * cp) * self.radius
    }

    /// Camera-to-world rotation; columns are the camera x (right), y (down)
    /// and z (forward) axes in world coordinates.
    pub fn rotation(&self) -> Matrix3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let forward = -Vector3::new(sy * cp, sp, cy * cp);
        // forward x up(0,1,0), already unit length for |pitch| < pi/2
        let right = Vector3::new(cy, 0.0, -sy);
        let down = forward.cross(&right);
        Matrix3::from_columns(&[right, down, forward])
    }

    /// Normalized focal length (image width = 1).
    pub fn focal(&self) -> f64 {
        0.5 / (0.5 * self.fov).tan()
    }

    pub fn to_label(&self) -> CameraLabel {
        pose_to_label(self)
    }
}

/// 4x4 camera-to-world extrinsic (row-major, 16 values) followed by the 3x3
/// normalized intrinsic (row-major, 9 values).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraLabel(pub [f64; LABEL_DIM]);

impl CameraLabel {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; LABEL_DIM] = values.try_into().map_err(|_| {
            Error::Shape(format!(
                "camera label needs {LABEL_DIM} values, got {}",
                values.len()
            ))
        })?;
        Ok(Self(arr))
    }

    fn rotation(&self) -> Matrix3<f64> {
        let e = &self.0;
        Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10])
    }

    fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[7], self.0[11])
    }

    fn focal(&self) -> f64 {
        self.0[16]
    }
}

pub fn pose_to_label(pose: &CameraPose) -> CameraLabel {
    let r = pose.rotation();
    let t = pose.position();
    let f = pose.focal();
    let mut v = [0.0; LABEL_DIM];
    for row in 0..3 {
        for col in 0..3 {
            v[row * 4 + col] = r[(row, col)];
        }
        v[row * 4 + 3] = t[row];
    }
    v[15] = 1.0;
    let k = [f, 0.0, 0.5, 0.0, f, 0.5, 0.0, 0.0, 1.0];
    v[16..].copy_from_slice(&k);
    CameraLabel(v)
}

pub fn label_to_pose(label: &CameraLabel) -> Result<CameraPose> {
    let e = &label.0;
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("camera label".into()));
    }
    let bottom = [e[12], e[13], e[14], e[15] - 1.0];
    let r = label.rotation();
    let gram = r.transpose() * r - Matrix3::identity();
    let max_dev = gram
        .iter()
        .chain(bottom.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max_dev > ORTHO_TOL || r.determinant() <= 0.0 {
        return Err(Error::NotOrthonormal {
            max_deviation: max_dev,
        });
    }
    let k = &e[16..];
    if k[0] <= 0.0 || k[4] <= 0.0 || k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0 {
        return Err(Error::invalid(
            "intrinsic block must be upper-triangular with a positive diagonal",
        ));
    }
    let t = label.translation();
    let radius = t.norm();
    let pitch = (t.y / radius).clamp(-1.0, 1.0).asin();
    let yaw = t.x.atan2(t.z);
    let fov = 2.0 * (0.5 / label.focal()).atan();
    CameraPose::new(yaw, pitch, radius, fov)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoseKind {
    /// Yaw uniform on the full circle.
    FullSphere,
    /// Yaw uniform on [-pi/4, pi/4].
    FrontBand,
    /// Degenerate distribution at one pose.
    Fixed { yaw: f64, pitch: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseDistribution {
    pub kind: PoseKind,
    pub pitch_range: (f64, f64),
    pub radius: f64,
    pub fov: f64,
}

impl PoseDistribution {
    fn with_kind(kind: PoseKind) -> Self {
        Self {
            kind,
            pitch_range: (-PI / 6.0, PI / 6.0),
            radius: DEFAULT_RADIUS,
            fov: DEFAULT_FOV,
        }
    }

    pub fn full_sphere() -> Self {
        Self::with_kind(PoseKind::FullSphere)
    }

    pub fn front_band() -> Self {
        Self::with_kind(PoseKind::FrontBand)
    }

    pub fn fixed(yaw: f64, pitch: f64) -> Self {
        Self::with_kind(PoseKind::Fixed { yaw, pitch })
    }

    pub fn front() -> Self {
        Self::fixed(0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pitch_range;
        if !(lo <= hi && lo >= -MAX_PITCH && hi <= MAX_PITCH) {
            return Err(Error::invalid(format!(
                "pitch range ({lo}, {hi}) must be ordered and within +-pi/3"
            )));
        }
        CameraPose::new(0.0, 0.0, self.radius, self.fov).map(|_| ())
    }
}

pub fn sample_pose<R: Rng + ?Sized>(dist: &PoseDistribution, rng: &mut R) -> CameraPose {
    let (lo, hi) = dist.pitch_range;
    let mut pitch = || if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let (yaw, pitch) = match dist.kind {
        PoseKind::Fixed { yaw, pitch } => (yaw, pitch),
        PoseKind::FullSphere => {
            let p = pitch();
            (rng.gen_range(0.0..2.0 * PI), p)
        }
        PoseKind::FrontBand => {
            let p = pitch();
            (rng.gen_range(-PI / 4.0..=PI / 4.0), p)
        }
    };
    CameraPose::new(yaw, pitch, dist.radius, dist.fov).expect("distribution was validated")
}

/// Counts yaws into `bins` equal sectors centred on multiples of 2*pi/bins
/// (the first sector is centred on the front view).
pub fn yaw_histogram(yaws: impl IntoIterator<Item = f64>, bins: usize) -> Vec<usize> {
    let width = 2.0 * PI / bins as f64;
    let mut hist = vec![0; bins];
    for y in yaws {
        let idx = ((y + 0.5 * width).rem_euclid(2.0 * PI) / width) as usize;
        hist[idx.min(bins - 1)] += 1;
    }
    hist
}

/// Row-major grid of unit rays through pixel centres.
#[derive(Debug, Clone)]
pub struct Rays {
    pub resolution: usize,
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
}

/// Ray from the camera through normalized image coordinates `(u, v)`,
/// where (0, 0) is the top-left image corner and (1, 1) the bottom-right.
pub fn ray_through(pose: &CameraPose, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    let f = pose.focal();
    let d_cam = Vector3::new((u - 0.5) / f, (v - 0.5) / f, 1.0);
    let d = (pose.rotation() * d_cam).normalize();
    let o = pose.position();
    ([o.x, o.y, o.z], [d.x, d.y, d.z])
}

pub fn generate_rays(pose: &CameraPose, resolution: usize) -> Result<Rays> {
    if resolution < 2 {
        return Err(Error::invalid(format!(
            "ray grid resolution must be >= 2, got {resolution}"
        )));
    }
    let f = pose.focal();
    let rot = pose.rotation();
    let o = pose.position();
    let n = resolution * resolution;
    let mut origins = Vec::with_capacity(n);
    let mut directions = Vec::with_capacity(n);
    let inv = 1.0 / resolution as f64;
    for i in 0..resolution {
        let v = (i as f64 + 0.5) * inv;
        for j in 0..resolution {
            let u = (j as f64 + 0.5) * inv;
            let d = (rot * Vector3::new((u - 0.5) / f, (v - 0.5) / f, 1.0)).normalize();
            origins.push([o.x, o.y, o.z]);
            directions.push([d.x, d.y, d.z]);
        }
    }
    Ok(Rays {
        resolution,
        origins,
        directions,
    })
}

/// Projects a world point to continuous pixel coordinates `(x, y)` for an
/// image of `resolution` pixels; `None` when the point is behind the camera.
pub fn project(label: &CameraLabel, point: [f64; 3], resolution: usize) -> Option<(f64, f64)> {
    let r = label.rotation();
    let c = label.translation();
    let p = r.transpose() * (Vector3::from(point) - c);
    if p.z <= 0.0 {
        return None;
    }
    let f = label.focal();
    let res = resolution as f64;
    Some(((f * p.x / p.z + 0.5) * res, (f * p.y / p.z + 0.5) * res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn front_label_is_canonical() {
        let label = CameraPose::front().to_label();
        let e = label.0;
        let rot = [e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]];
        let expected = [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0];
        for (a, b) in rot.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!([e[3], e[7], e[11]], [0.0, 0.0, DEFAULT_RADIUS]);
        assert_eq!(&e[12..16], &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn round_trip_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut max_err = 0.0f64;
        for _ in 0..1000 {
            let pose = CameraPose::new(
                rng.gen_range(-PI..PI),
                rng.gen_range(-MAX_PITCH..MAX_PITCH),
                rng.gen_range(0.5..5.0),
                rng.gen_range(0.1..2.5),
            )
            .unwrap();
            let back = label_to_pose(&pose.to_label()).unwrap();
            for (a, b) in [
                (pose.yaw, back.yaw),
                (pose.pitch, back.pitch),
                (pose.radius, back.radius),
                (pose.fov, back.fov),
            ] {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-12, "max round-trip error {max_err}");
    }

    #[test]
    fn tampered_label_rejected() {
        let mut label = CameraPose::from_degrees(30.0, 10.0).unwrap().to_label();
        for c in 0..3 {
            label.0[4 + c] *= 1.01;
        }
        match label_to_pose(&label) {
            Err(Error::NotOrthonormal { max_deviation }) => assert!(max_deviation > 1e-3),
            other => panic!("expected orthonormality error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite_pose() {
        assert!(CameraPose::new(f64::NAN, 0.0, 2.0, 0.5).is_err());
        assert!(CameraPose::new(0.0, 0.0, f64::INFINITY, 0.5).is_err());
        assert!(CameraPose::new(0.0, 0.0, -1.0, 0.5).is_err());
    }

    #[test]
    fn fixed_front_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = sample_pose(&PoseDistribution::front(), &mut rng);
            assert_eq!((p.yaw, p.pitch), (0.0, 0.0));
        }
    }

    #[test]
    fn full_sphere_yaw_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dist = PoseDistribution::full_sphere();
        let hist = yaw_histogram((0..100_000).map(|_| sample_pose(&dist, &mut rng).yaw), 8);
        let max = *hist.iter().max().unwrap() as f64;
        let min = *hist.iter().min().unwrap() as f64;
        assert!(max / min <= 1.1, "histogram {hist:?}");
    }

    #[test]
    fn front_band_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = PoseDistribution::front_band();
        for _ in 0..10_000 {
            let p = sample_pose(&dist, &mut rng);
            assert!(p.yaw.abs() <= PI / 4.0 + 1e-15);
            assert!(p.pitch.abs() <= PI / 6.0);
        }
    }

    #[test]
    fn rays_are_unit_and_center_hits_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let pose = sample_pose(&PoseDistribution::full_sphere(), &mut rng);
            let rays = generate_rays(&pose, 9).unwrap();
            for d in &rays.directions {
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
            // odd grid: the middle pixel centre is the image centre
            let mid = 4 * 9 + 4;
            let (o, d) = (rays.origins[mid], rays.directions[mid]);
            let t = -(o[0] * d[0] + o[1] * d[1] + o[2] * d[2]);
            let closest = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let dist = closest.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dist < 1e-9, "central ray misses origin by {dist}");
        }
    }

    #[test]
    fn mirrored_yaw_mirrors_ray_field() {
        let res = 8;
        let a = generate_rays(&CameraPose::from_degrees(37.0, 12.0).unwrap(), res).unwrap();
        let b = generate_rays(&CameraPose::from_degrees(-37.0, 12.0).unwrap(), res).unwrap();
        let mut max_diff = 0.0f64;
        for i in 0..res {
            for j in 0..res {
                let pa = i * res + j;
                let pb = i * res + (res - 1 - j);
                let flip = |v: [f64; 3]| [-v[0], v[1], v[2]];
                for (x, y) in flip(a.directions[pa]).iter().zip(b.directions[pb]) {
                    max_diff = max_diff.max((x - y).abs());
                }
                for (x, y) in flip(a.origins[pa]).iter().zip(b.origins[pb]) {
                    max_diff = max_diff.max((x - y).abs());
                }
            }
        }
        assert!(max_diff < 1e-9, "mirror mismatch {max_diff}");
    }

    #[test]
    fn reprojection_matches_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let res = 32;
        for _ in 0..200 {
            let pose = sample_pose(&PoseDistribution::full_sphere(), &mut rng);
            let rays = generate_rays(&pose, res).unwrap();
            let (i, j) = (rng.gen_range(0..res), rng.gen_range(0..res));
            let k = i * res + j;
            let t = rng.gen_range(1.0..4.0);
            let (o, d) = (rays.origins[k], rays.directions[k]);
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let (x, y) = project(&pose.to_label(), p, res).unwrap();
            let err = ((x - (j as f64 + 0.5)).powi(2) + (y - (i as f64 + 0.5)).powi(2)).sqrt();
            assert!(err < 0.5, "reprojection error {err}");
        }
    }
}
