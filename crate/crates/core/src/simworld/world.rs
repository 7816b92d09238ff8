//! Parametric tunnel networks and analytic ray casting against their union.

use super::SimError;
use crate::geom::Vec3;
use serde::{Deserialize, Serialize};

/// Tolerance for endpoint coincidence and on-axis tests.
const JOIN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CrossSection {
    Circular,
    Rectangular { width: f64, height: f64 },
}

impl Default for CrossSection {
    fn default() -> Self {
        CrossSection::Circular
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    #[serde(default)]
    pub cross_section: CrossSection,
}

/// World section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub surface_noise_sigma: f64,
    /// Lattice spacing of the wall roughness field, meters.
    #[serde(default = "default_roughness_scale")]
    pub roughness_scale: f64,
    pub segments: Vec<SegmentSpec>,
}

fn default_roughness_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
    pub cross_section: CrossSection,
}

impl Segment {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn direction(&self) -> Vec3 {
        (self.end - self.start).normalize()
    }

    /// Axial parameter and distance of `p` from the segment's axis line.
    fn axis_projection(&self, p: &Vec3) -> (f64, f64) {
        let u = self.direction();
        let s = (p - self.start).dot(&u);
        let perp = (p - self.start) - u * s;
        (s, perp.norm())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub point: Vec3,
    pub segments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunnelWorld {
    pub segments: Vec<Segment>,
    pub junctions: Vec<Junction>,
    pub surface_noise_sigma: f64,
    pub roughness_scale: f64,
    pub seed: u64,
    #[serde(skip)]
    solids: Vec<Solid>,
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Circular { r: f64 },
    Rect { half_w: f64, half_h: f64 },
}

/// One segment's volume in its local frame (`u` along the axis, `w`
/// horizontal, `v` up), possibly extended past joined endpoints.
#[derive(Debug, Clone, PartialEq)]
struct Solid {
    origin: Vec3,
    u: Vec3,
    w: Vec3,
    v: Vec3,
    length: f64,
    shape: Shape,
    center: Vec3,
    bound: f64,
}

impl Solid {
    fn local(&self, p: &Vec3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.dot(&self.u), d.dot(&self.w), d.dot(&self.v))
    }

    fn local_dir(&self, d: &Vec3) -> Vec3 {
        Vec3::new(d.dot(&self.u), d.dot(&self.w), d.dot(&self.v))
    }

    fn contains(&self, p: &Vec3, margin: f64) -> bool {
        let l = self.local(p);
        if l.x < margin || l.x > self.length - margin {
            return false;
        }
        match self.shape {
            Shape::Circular { r } => l.y * l.y + l.z * l.z < (r - margin) * (r - margin),
            Shape::Rect { half_w, half_h } => l.y.abs() < half_w - margin && l.z.abs() < half_h - margin,
        }
    }

    /// Parameter interval along `o + t·d` that lies inside the solid.
    fn interval(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let lo = self.local(o);
        let ld = self.local_dir(d);
        let (mut t0, mut t1) = slab(lo.x, ld.x, 0.0, self.length)?;
        let (a0, a1) = match self.shape {
            Shape::Circular { r } => {
                let a = ld.y * ld.y + ld.z * ld.z;
                let b = 2.0 * (lo.y * ld.y + lo.z * ld.z);
                let c = lo.y * lo.y + lo.z * lo.z - r * r;
                if a < 1e-18 {
                    if c <= 0.0 {
                        (f64::NEG_INFINITY, f64::INFINITY)
                    } else {
                        return None;
                    }
                } else {
                    let disc = b * b - 4.0 * a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let sq = disc.sqrt();
                    // numerically stable roots
                    let sgn = if b >= 0.0 { 1.0 } else { -1.0 };
                    let q = -0.5 * (b + sgn * sq);
                    let (r0, r1) = if q != 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
                    if r0 < r1 {
                        (r0, r1)
                    } else {
                        (r1, r0)
                    }
                }
            }
            Shape::Rect { half_w, half_h } => {
                let (y0, y1) = slab(lo.y, ld.y, -half_w, half_w)?;
                let (z0, z1) = slab(lo.z, ld.z, -half_h, half_h)?;
                (y0.max(z0), y1.min(z1))
            }
        };
        t0 = t0.max(a0);
        t1 = t1.min(a1);
        (t0 < t1).then_some((t0, t1))
    }
}

fn slab(o: f64, d: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if d.abs() < 1e-15 {
        return (o >= lo && o <= hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let a = (lo - o) / d;
    let b = (hi - o) / d;
    Some(if a < b { (a, b) } else { (b, a) })
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> SimError {
    SimError::InvalidSpec { field: field.into(), reason: reason.into() }
}

/// Validates a world config and builds the immutable world.
pub fn build_world(spec: &WorldConfig) -> Result<TunnelWorld, SimError> {
    if spec.segments.is_empty() {
        return Err(invalid("segments", "at least one segment is required"));
    }
    if !(spec.surface_noise_sigma >= 0.0 && spec.surface_noise_sigma.is_finite()) {
        return Err(invalid("surface_noise_sigma", "must be finite and >= 0"));
    }
    if !(spec.roughness_scale > 0.0 && spec.roughness_scale.is_finite()) {
        return Err(invalid("roughness_scale", "must be positive"));
    }
    let mut segments = Vec::with_capacity(spec.segments.len());
    for (i, s) in spec.segments.iter().enumerate() {
        let start = Vec3::from(s.start);
        let end = Vec3::from(s.end);
        if !start.iter().chain(end.iter()).all(|c| c.is_finite()) {
            return Err(invalid(format!("segments[{i}]"), "non-finite endpoint"));
        }
        if (end - start).norm() < 1e-3 {
            return Err(invalid(format!("segments[{i}]"), "start and end coincide"));
        }
        if (end - start).normalize().z.abs() > 0.99 {
            return Err(invalid(format!("segments[{i}]"), "vertical shafts are not supported"));
        }
        if !(s.radius > 0.0 && s.radius.is_finite()) {
            return Err(invalid(format!("segments[{i}].radius"), "must be positive"));
        }
        if let CrossSection::Rectangular { width, height } = s.cross_section {
            if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
                return Err(invalid(format!("segments[{i}].cross_section"), "width and height must be positive"));
            }
        }
        segments.push(Segment { start, end, radius: s.radius, cross_section: s.cross_section });
    }

    let junctions = find_junctions(&segments);
    check_connected(segments.len(), &junctions)?;
    let solids = build_solids(&segments);
    Ok(TunnelWorld {
        segments,
        junctions,
        surface_noise_sigma: spec.surface_noise_sigma,
        roughness_scale: spec.roughness_scale,
        seed: spec.seed,
        solids,
    })
}

/// Groups segments meeting at a point. A junction point is an endpoint of at
/// least one member and lies on the axis of every other member (T-junctions
/// join a segment end to the interior of another).
fn find_junctions(segments: &[Segment]) -> Vec<Junction> {
    let mut junctions: Vec<Junction> = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        for p in [s.start, s.end] {
            if junctions.iter().any(|j| (j.point - p).norm() < JOIN_EPS) {
                continue;
            }
            let mut members = vec![i];
            for (k, other) in segments.iter().enumerate() {
                if k == i {
                    continue;
                }
                let (t, dist) = other.axis_projection(&p);
                if dist < JOIN_EPS && t > -JOIN_EPS && t < other.length() + JOIN_EPS {
                    members.push(k);
                }
            }
            if members.len() > 1 {
                members.sort_unstable();
                junctions.push(Junction { point: p, segments: members });
            }
        }
    }
    junctions
}

fn check_connected(n: usize, junctions: &[Junction]) -> Result<(), SimError> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        parent[x] = r;
        r
    }
    for j in junctions {
        for w in j.segments.windows(2) {
            let a = find(&mut parent, w[0]);
            let b = find(&mut parent, w[1]);
            parent[a.max(b)] = a.min(b);
        }
    }
    let root = find(&mut parent, 0);
    if let Some(i) = (0..n).find(|&i| find(&mut parent, i) != root) {
        return Err(invalid(format!("segments[{i}]"), "network is not connected"));
    }
    Ok(())
}

fn build_solids(segments: &[Segment]) -> Vec<Solid> {
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let u = s.direction();
            let w = u.cross(&Vec3::z()).normalize();
            let v = w.cross(&u);
            let (shape, reach) = match s.cross_section {
                CrossSection::Circular => (Shape::Circular { r: s.radius }, s.radius),
                CrossSection::Rectangular { width, height } => (
                    Shape::Rect { half_w: 0.5 * width, half_h: 0.5 * height },
                    0.5 * width.max(height),
                ),
            };
            // Extend past endpoints shared with another segment's endpoint so
            // bends have no wedge-shaped gap.
            let joined = |p: &Vec3| {
                segments
                    .iter()
                    .enumerate()
                    .any(|(k, o)| k != i && ((o.start - p).norm() < JOIN_EPS || (o.end - p).norm() < JOIN_EPS))
            };
            let ext_start = if joined(&s.start) { reach } else { 0.0 };
            let ext_end = if joined(&s.end) { reach } else { 0.0 };
            let origin = s.start - u * ext_start;
            let length = s.length() + ext_start + ext_end;
            let center = origin + u * (0.5 * length);
            let bound = (0.25 * length * length + 2.0 * reach * reach).sqrt();
            Solid { origin, u, w, v, length, shape, center, bound }
        })
        .collect()
}

impl TunnelWorld {
    fn solids(&self) -> &[Solid] {
        &self.solids
    }

    /// True when `p` is strictly inside the tunnel volume.
    pub fn contains(&self, p: &Vec3) -> bool {
        self.solids().iter().any(|s| s.contains(p, 1e-9))
    }

    /// Index of the first segment whose volume contains `p`.
    pub fn segment_at(&self, p: &Vec3) -> Option<usize> {
        self.solids().iter().position(|s| s.contains(p, 1e-9))
    }

    pub(crate) fn solids_near(&self, p: &Vec3, range: f64) -> Vec<usize> {
        self.solids()
            .iter()
            .enumerate()
            .filter(|(_, s)| (s.center - p).norm() - s.bound <= range)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distance along the unit ray `o + t·d` to the first boundary of the
    /// union of segment volumes. `o` must be inside the world.
    pub fn ray_exit(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let all: Vec<usize> = (0..self.solids.len()).collect();
        self.ray_exit_among(o, d, &all, &mut Vec::new())
    }

    pub(crate) fn ray_exit_among(
        &self,
        o: &Vec3,
        d: &Vec3,
        candidates: &[usize],
        scratch: &mut Vec<(f64, f64)>,
    ) -> Option<f64> {
        scratch.clear();
        for &i in candidates {
            if let Some((t0, t1)) = self.solids[i].interval(o, d) {
                if t1 > 0.0 {
                    scratch.push((t0, t1));
                }
            }
        }
        let mut cur = 0.0;
        let mut found = false;
        loop {
            let mut next = cur;
            for &(t0, t1) in scratch.iter() {
                if t0 <= cur + 1e-12 && t1 > next {
                    next = t1;
                }
            }
            if next > cur {
                cur = next;
                found = true;
            } else {
                break;
            }
        }
        (found && cur.is_finite()).then_some(cur)
    }

    /// Deterministic wall roughness at a surface point, meters.
    pub fn surface_offset(&self, p: &Vec3) -> f64 {
        if self.surface_noise_sigma == 0.0 {
            return 0.0;
        }
        self.surface_noise_sigma * value_noise(self.seed, &(p / self.roughness_scale))
    }

    /// Restores the derived ray-casting data after deserialization.
    pub fn rebuild(mut self) -> Self {
        self.solids = build_solids(&self.segments);
        self
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Standard-normal lattice value at an integer cell.
fn lattice(seed: u64, ix: i64, iy: i64, iz: i64) -> f64 {
    let h = splitmix(splitmix(splitmix(seed ^ ix as u64) ^ iy as u64) ^ iz as u64);
    let u1 = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = ((splitmix(h) >> 11) as f64) / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Trilinear interpolation of normal lattice values.
fn value_noise(seed: u64, p: &Vec3) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (p.x - fx, p.y - fy, p.z - fz);
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                acc += wx * wy * wz * lattice(seed, ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}
