//! Plane-based 3D feature fields and the density/colour decoder.
//!
//! A point is projected onto every plane of the representation, each plane
//! is sampled bilinearly and the per-plane features are summed. All lookups
//! are expressed as sparse taps into one flattened (rows, C) table so a
//! single gather-sum op covers every representation, and gradients flow to
//! the plane texels.
//!
//! Spherical planes are equirectangular in (azimuth, polar angle, radius).
//! Azimuth is measured so that its wrap seam sits behind the head and the
//! lookup wraps around it; the polar angle and radius are clamped.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{apply_taps, sigmoid, softplus, to_f64_vec, EqLinear, ParamStore, Taps};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlaneKind {
    TriPlane,
    TriGrid,
    SphSingle,
    SphDual,
    HyPlane,
}

impl PlaneKind {
    pub const ALL: [PlaneKind; 5] = [
        PlaneKind::TriPlane,
        PlaneKind::TriGrid,
        PlaneKind::SphSingle,
        PlaneKind::SphDual,
        PlaneKind::HyPlane,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PlaneKind::TriPlane => "tri_plane",
            PlaneKind::TriGrid => "tri_grid",
            PlaneKind::SphSingle => "sph_single",
            PlaneKind::SphDual => "sph_dual",
            PlaneKind::HyPlane => "hy_plane",
        }
    }

    pub fn is_spherical(&self) -> bool {
        matches!(self, PlaneKind::SphSingle | PlaneKind::SphDual | PlaneKind::HyPlane)
    }
}

impl fmt::Display for PlaneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlaneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        PlaneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown plane representation '{s}'")))
    }
}

/// Shape of a plane stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneLayout {
    pub kind: PlaneKind,
    pub resolution: usize,
    pub channels: usize,
    /// Stacked planes per axis; only used by `TriGrid`.
    pub grid_depth: usize,
}

impl PlaneLayout {
    pub fn new(kind: PlaneKind, resolution: usize, channels: usize) -> Self {
        Self {
            kind,
            resolution,
            channels,
            grid_depth: 3,
        }
    }

    pub fn plane_count(&self) -> usize {
        match self.kind {
            PlaneKind::TriPlane | PlaneKind::SphSingle => 3,
            PlaneKind::TriGrid => 3 * self.grid_depth,
            PlaneKind::SphDual => 6,
            PlaneKind::HyPlane => 4,
        }
    }

    pub fn taps_per_point(&self) -> usize {
        match self.kind {
            PlaneKind::TriPlane | PlaneKind::SphSingle => 12,
            PlaneKind::TriGrid | PlaneKind::SphDual => 24,
            PlaneKind::HyPlane => 16,
        }
    }

    pub fn rows_per_item(&self) -> usize {
        self.plane_count() * self.resolution * self.resolution
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || self.channels == 0 {
            return Err(Error::invalid(format!(
                "plane resolution must be >= 2 and channels >= 1, got {}x{}",
                self.resolution, self.channels
            )));
        }
        if self.kind == PlaneKind::TriGrid && self.grid_depth < 2 {
            return Err(Error::invalid("tri_grid needs grid_depth >= 2"));
        }
        Ok(())
    }
}

/// A batch of plane stacks stored as one (B * P * R * R, C) table.
#[derive(Debug, Clone)]
pub struct PlaneSet {
    pub layout: PlaneLayout,
    pub batch: usize,
    pub data: Tensor,
}

impl PlaneSet {
    pub fn new(layout: PlaneLayout, batch: usize, data: Tensor) -> Result<Self> {
        layout.validate()?;
        let (rows, c) = data.dims2()?;
        if rows != batch * layout.rows_per_item() || c != layout.channels {
            return Err(Error::Shape(format!(
                "plane table {rows}x{c} does not match {batch} x {:?}",
                layout
            )));
        }
        Ok(Self { layout, batch, data })
    }

    /// Builds a single-item plane set from host values laid out as
    /// (plane, row, col, channel).
    pub fn from_host(layout: PlaneLayout, values: Vec<f64>, dtype: candle_core::DType) -> Result<Self> {
        let rows = layout.rows_per_item();
        let data = crate::nn::tensor_from(values, (rows, layout.channels), dtype)?;
        Self::new(layout, 1, data)
    }

    pub fn to_host(&self) -> Result<Vec<f64>> {
        to_f64_vec(&self.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingOptions {
    /// Wrap azimuthal lookups around the seam; disabling clamps instead.
    pub wrap_azimuth: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { wrap_azimuth: true }
    }
}

/// Bilinear taps on one plane; `u` indexes columns, `v` rows, both in [0, 1].
#[allow(clippy::too_many_arguments)]
fn push_bilinear(
    taps: &mut Taps,
    base: usize,
    res: usize,
    u: f64,
    v: f64,
    wrap_u: bool,
    scale: f64,
) {
    let r = res as f64;
    let (u0, u1, fu) = if wrap_u {
        let px = u * r - 0.5;
        let fl = px.floor();
        let i0 = (fl as i64).rem_euclid(res as i64) as usize;
        (i0, (i0 + 1) % res, px - fl)
    } else {
        axis_clamped(u, res)
    };
    let (v0, v1, fv) = axis_clamped(v, res);
    taps.push(base + v0 * res + u0, scale * (1.0 - fu) * (1.0 - fv));
    taps.push(base + v0 * res + u1, scale * fu * (1.0 - fv));
    taps.push(base + v1 * res + u0, scale * (1.0 - fu) * fv);
    taps.push(base + v1 * res + u1, scale * fu * fv);
}

fn axis_clamped(s: f64, res: usize) -> (usize, usize, f64) {
    let px = (s * res as f64 - 0.5).clamp(0.0, (res - 1) as f64);
    let i0 = (px.floor() as usize).min(res - 1);
    let i1 = (i0 + 1).min(res - 1);
    (i0, i1, px - i0 as f64)
}

fn unit_coord(x: f64) -> f64 {
    (x.clamp(-1.0, 1.0) + 1.0) * 0.5
}

/// (azimuth / 2pi, polar / pi, radius / sqrt 3); azimuth 0 is straight
/// behind the head (-z).
pub fn spherical_coords(p: [f64; 3]) -> (f64, f64, f64) {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let theta = (-p[0]).atan2(-p[2]).rem_euclid(2.0 * PI);
    let phi = if r < 1e-12 {
        0.5 * PI
    } else {
        (p[1] / r).clamp(-1.0, 1.0).acos()
    };
    let t = theta / (2.0 * PI);
    // rem_euclid can return exactly 2pi for tiny negative inputs
    let t = if t >= 1.0 { 0.0 } else { t };
    (t, phi / PI, (r / SQRT3).min(1.0))
}

fn push_sphere(
    taps: &mut Taps,
    base: usize,
    layout: &PlaneLayout,
    p: [f64; 3],
    scale: f64,
    wrap: bool,
) {
    let res = layout.resolution;
    let plane = res * res;
    let (t, ph, rho) = spherical_coords(p);
    push_bilinear(taps, base, res, t, ph, wrap, scale);
    push_bilinear(taps, base + plane, res, t, rho, wrap, scale);
    push_bilinear(taps, base + 2 * plane, res, ph, rho, false, scale);
}

fn push_triplane(taps: &mut Taps, base: usize, res: usize, p: [f64; 3]) {
    let plane = res * res;
    let (x, y, z) = (unit_coord(p[0]), unit_coord(p[1]), unit_coord(p[2]));
    push_bilinear(taps, base, res, x, y, false, 1.0);
    push_bilinear(taps, base + plane, res, x, z, false, 1.0);
    push_bilinear(taps, base + 2 * plane, res, y, z, false, 1.0);
}

/// Builds the lookup taps for per-item point lists.
pub fn build_taps(
    layout: &PlaneLayout,
    points: &[Vec<[f64; 3]>],
    opts: SamplingOptions,
) -> Result<Taps> {
    let total: usize = points.iter().map(Vec::len).sum();
    let mut taps = Taps::with_capacity(total, layout.taps_per_point());
    let res = layout.resolution;
    let plane = res * res;
    for (b, pts) in points.iter().enumerate() {
        let base = b * layout.rows_per_item();
        for (i, &p) in pts.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample point {i} of item {b}: {p:?}")));
            }
            let p = [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0), p[2].clamp(-1.0, 1.0)];
            match layout.kind {
                PlaneKind::TriPlane => push_triplane(&mut taps, base, res, p),
                PlaneKind::TriGrid => {
                    let depth = layout.grid_depth;
                    let (x, y, z) = (unit_coord(p[0]), unit_coord(p[1]), unit_coord(p[2]));
                    // (u, v, stacking coordinate) per axis group
                    for (g, (u, v, d)) in [(x, y, z), (x, z, y), (y, z, x)].into_iter().enumerate() {
                        let (d0, d1, fd) = axis_clamped(d, depth);
                        let b0 = base + (g * depth + d0) * plane;
                        let b1 = base + (g * depth + d1) * plane;
                        push_bilinear(&mut taps, b0, res, u, v, false, 1.0 - fd);
                        push_bilinear(&mut taps, b1, res, u, v, false, fd);
                    }
                }
                PlaneKind::SphSingle => {
                    push_sphere(&mut taps, base, layout, p, 1.0, opts.wrap_azimuth)
                }
                PlaneKind::SphDual => {
                    push_sphere(&mut taps, base, layout, p, 0.5, opts.wrap_azimuth);
                    // second sphere rotated 90 degrees about z: poles on the x axis
                    let q = [p[1], -p[0], p[2]];
                    push_sphere(&mut taps, base + 3 * plane, layout, q, 0.5, opts.wrap_azimuth);
                }
                PlaneKind::HyPlane => {
                    let (t, ph, _) = spherical_coords(p);
                    push_bilinear(&mut taps, base, res, t, ph, opts.wrap_azimuth, 1.0);
                    push_triplane(&mut taps, base + plane, res, p);
                }
            }
        }
    }
    Ok(taps)
}

/// Features (N, C) for per-item point lists (one list per batch item).
pub fn sample_features(planes: &PlaneSet, points: &[Vec<[f64; 3]>]) -> Result<Tensor> {
    sample_features_with(planes, points, SamplingOptions::default())
}

pub fn sample_features_with(
    planes: &PlaneSet,
    points: &[Vec<[f64; 3]>],
    opts: SamplingOptions,
) -> Result<Tensor> {
    if points.len() != planes.batch {
        return Err(Error::Shape(format!(
            "{} point lists for a batch of {} plane sets",
            points.len(),
            planes.batch
        )));
    }
    let taps = build_taps(&planes.layout, points, opts)?;
    apply_taps(&planes.data, Arc::new(taps))
}

/// Density and colour at a set of points.
#[derive(Debug, Clone)]
pub struct FieldSample {
    /// (N,), non-negative.
    pub sigma: Tensor,
    /// (N, 3), in [0, 1].
    pub color: Tensor,
}

/// Two-layer perceptron from plane features to (density, rgb).
#[derive(Debug, Clone)]
pub struct Decoder {
    hidden: EqLinear,
    out: EqLinear,
    channels: usize,
}

/// Initial density logit bias; keeps untrained fields semi-transparent.
pub const DENSITY_BIAS_INIT: f64 = -1.0;

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden_l = EqLinear::new(store, &format!("{name}.hidden"), channels, hidden, Some(0.0), 1.0, rng)?;
        let out = EqLinear::new(store, &format!("{name}.out"), hidden, 4, Some(0.0), 1.0, rng)?;
        let bias = store.get(&format!("{name}.out.bias"))?;
        bias.set(&crate::nn::tensor_from(
            vec![DENSITY_BIAS_INIT, 0.0, 0.0, 0.0],
            4,
            store.dtype(),
        )?)?;
        Ok(Self {
            hidden: hidden_l,
            out,
            channels,
        })
    }

    pub fn decode(&self, features: &Tensor) -> Result<FieldSample> {
        let (_, c) = features.dims2()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "decoder expects {} feature channels, got {c}",
                self.channels
            )));
        }
        let h = softplus(&self.hidden.forward(features)?)?;
        let o = self.out.forward(&h)?;
        let sigma = softplus(&o.narrow(1, 0, 1)?.squeeze(1)?)?;
        let color = sigmoid(&o.narrow(1, 1, 3)?)?;
        Ok(FieldSample { sigma, color })
    }
}

/// Maximum feature discontinuity across the azimuthal seam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeamReport {
    pub max_jump: f64,
    /// max - min over all plane values, for scale.
    pub content_range: f64,
    pub pairs: usize,
}

/// Probes the first item of a spherical-family plane set with point pairs
/// `eps` apart that straddle the azimuth seam.
pub fn seam_probe(planes: &PlaneSet, eps: f64, opts: SamplingOptions) -> Result<SeamReport> {
    if !planes.layout.kind.is_spherical() {
        return Err(Error::invalid(format!(
            "seam probe needs a spherical representation, got {}",
            planes.layout.kind
        )));
    }
    let single = PlaneSet::new(
        planes.layout,
        1,
        planes.data.narrow(0, 0, planes.layout.rows_per_item())?,
    )?;
    let table = single.to_host()?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for ip in 1..8 {
        let phi = PI * ip as f64 / 8.0;
        for ir in 1..5 {
            let r = 0.2 * ir as f64;
            let ring = r * phi.sin();
            let half = 0.5 * eps / ring;
            let at = |theta: f64| {
                // azimuth measured from -z: x = -ring sin(theta), z = -ring cos(theta)
                [-ring * theta.sin(), r * phi.cos(), -ring * theta.cos()]
            };
            a.push(at(half));
            b.push(at(-half));
        }
    }
    let c = planes.layout.channels;
    let fa = build_taps(&planes.layout, &[a.clone()], opts)?.apply_host(&table, c);
    let fb = build_taps(&planes.layout, &[b], opts)?.apply_host(&table, c);
    let max_jump = fa
        .iter()
        .zip(&fb)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let (lo, hi) = table
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    Ok(SeamReport {
        max_jump,
        content_range: hi - lo,
        pairs: a.len(),
    })
}
