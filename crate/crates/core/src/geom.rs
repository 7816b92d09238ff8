//! Rigid-body geometry shared by every stage of the pipeline: SE(3) poses with
//! their exponential/logarithm maps and Jacobians, point clouds, PCA oriented
//! bounding boxes and closed-form point-set alignment.
//!
//! Tangent vectors are ordered rotation first, `(ω, v)`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, SymmetricEigen, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Mul;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
}

/// Skew-symmetric cross-product matrix.
pub fn hat(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform in 3-D. The stored quaternion always has `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

/// Flips the quaternion into the `w >= 0` hemisphere. On the `w == 0` great
/// circle the first nonzero imaginary component is made positive.
fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.coords; // (i, j, k, w)
    let flip = if c.w != 0.0 {
        c.w < 0.0
    } else {
        [c.x, c.y, c.z].iter().find(|v| **v != 0.0).map(|v| *v < 0.0).unwrap_or(false)
    };
    if flip {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        // Renormalize to keep the unit-norm invariant tight after long chains.
        let rotation = UnitQuaternion::new_normalize(rotation.into_inner());
        Self { rotation: canonical(rotation), translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(r: UnitQuaternion<f64>) -> Self {
        Self::new(r, Vec3::zeros())
    }

    /// Rotation about +z by `yaw` radians followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: Vec3) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), t)
    }

    /// Builds a pose from quaternion components. Returns `None` for a zero or
    /// non-finite quaternion.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, t: Vec3) -> Option<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 || !t.iter().all(|v| v.is_finite()) {
            return None;
        }
        // Values already unit within print precision are kept as-is so that
        // text round-trips are stable.
        let unit = if (n - 1.0).abs() < 1e-10 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Some(Self { rotation: canonical(unit), translation: t })
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Quaternion as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3::new(
            self.rotation * other.rotation,
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn inverse(&self) -> Pose3 {
        let r = self.rotation.inverse();
        Pose3::new(r, -(r * self.translation))
    }

    /// `self⁻¹ ∘ other`, the pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose3) -> Pose3 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation.norm()
    }

    pub fn yaw(&self) -> f64 {
        let r = self.rotation_matrix();
        r[(1, 0)].atan2(r[(0, 0)])
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose3 {
        let r: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
        let rot = UnitQuaternion::from_matrix(&r);
        Pose3::new(rot, m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Exponential map from a twist `(ω, v)`.
    pub fn exp(xi: &Vec6) -> Pose3 {
        let omega = Vec3::new(xi[0], xi[1], xi[2]);
        let v = Vec3::new(xi[3], xi[4], xi[5]);
        let rotation = so3_exp(&omega);
        let t = so3_left_jacobian(&omega) * v;
        Pose3::new(rotation, t)
    }

    /// Logarithm map. At a rotation angle of exactly π the axis sign follows
    /// the canonical quaternion (first nonzero imaginary component positive).
    pub fn log(&self) -> Vec6 {
        let omega = so3_log(&self.rotation);
        let v = so3_left_jacobian_inv(&omega) * self.translation;
        Vec6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    /// Adjoint in `(ω, v)` ordering: `[[R, 0], [t^ R, R]]`.
    pub fn adjoint(&self) -> Mat6 {
        let r = self.rotation_matrix();
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Projection onto the ground plane: keeps x, y and yaw.
    pub fn planar(&self) -> Pose3 {
        Pose3::from_yaw(self.yaw(), Vec3::new(self.translation.x, self.translation.y, 0.0))
    }
}

impl Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

impl Mul for &Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: &Pose3) -> Pose3 {
        self.compose(rhs)
    }
}

pub fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    let theta = omega.norm();
    let half = 0.5 * theta;
    let (s, c) = half.sin_cos();
    // sin(θ/2)/θ
    let k = if theta < 1e-8 { 0.5 - theta * theta / 48.0 } else { s / theta };
    UnitQuaternion::new_unchecked(Quaternion::new(c, k * omega.x, k * omega.y, k * omega.z))
}

pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    let q = canonical(*q);
    let w = q.quaternion().w;
    let v = q.quaternion().imag();
    let n = v.norm();
    if n < 1e-10 {
        // θ ≈ 2n/w
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w));
    }
    let theta = 2.0 * n.atan2(w);
    v * (theta / n)
}

/// Series-safe evaluation of the rotation coefficients
/// `(sinθ/θ, (1−cosθ)/θ², (θ−sinθ)/θ³)`.
fn rot_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / (theta * theta), (theta - s) / (theta * theta * theta))
    }
}

pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (_, b, c) = rot_coeffs(theta);
    let w = hat(omega);
    Mat3::identity() + w * b + w * w * c
}

pub fn so3_left_jacobian_inv(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = hat(omega);
    // (1 − (θ/2)·cot(θ/2)) / θ²
    let c = if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Mat3::identity() - w * 0.5 + w * w * c
}

/// Coupling block `Q(v, ω)` of the SE(3) left Jacobian.
fn se3_q(omega: &Vec3, v: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (a1, a2, a3) = if theta < 1e-3 {
        let t2 = theta * theta;
        (1.0 / 6.0 - t2 / 120.0, 1.0 / 24.0 - t2 / 720.0, 1.0 / 120.0 - t2 / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = hat(omega);
    let r = hat(v);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * a1 + (p * pr + rp * p - prp * 3.0) * a2 + (prp * p + p * prp) * a3
}

/// SE(3) left Jacobian: `exp(ξ + δ) ≈ exp(J_l(ξ) δ) exp(ξ)`.
pub fn se3_left_jacobian(xi: &Vec6) -> Mat6 {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let v = Vec3::new(xi[3], xi[4], xi[5]);
    let j = so3_left_jacobian(&omega);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&se3_q(&omega, &v));
    out
}

pub fn se3_left_jacobian_inv(xi: &Vec6) -> Mat6 {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let v = Vec3::new(xi[3], xi[4], xi[5]);
    let ji = so3_left_jacobian_inv(&omega);
    let q = se3_q(&omega, &v);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ji * q * ji));
    out
}

/// SE(3) right Jacobian inverse, `J_r⁻¹(ξ) = J_l⁻¹(−ξ)`.
pub fn se3_right_jacobian_inv(xi: &Vec6) -> Mat6 {
    se3_left_jacobian_inv(&(-xi))
}

/// A set of 3-D points with optional per-point intensity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Vec3>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeomError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeomError::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, intensity: None })
    }

    pub fn with_intensity(points: Vec<Vec3>, intensity: Vec<f64>) -> Result<Self, GeomError> {
        if intensity.len() != points.len() {
            return Err(GeomError::InvalidCloud(format!(
                "{} intensities for {} points",
                intensity.len(),
                points.len()
            )));
        }
        let mut cloud = Self::new(points)?;
        cloud.intensity = Some(intensity);
        Ok(cloud)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            intensity: self.intensity.clone(),
        }
    }

    /// Replaces every occupied voxel by the centroid of its points (and the
    /// mean intensity). Output is ordered by voxel coordinate.
    pub fn voxel_downsample(&self, voxel: f64) -> PointCloud {
        if voxel <= 0.0 {
            return self.clone();
        }
        let mut cells: BTreeMap<(i64, i64, i64), (Vec3, f64, usize)> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            let key = voxel_key(p, voxel);
            let inten = self.intensity.as_ref().map(|v| v[i]).unwrap_or(0.0);
            let e = cells.entry(key).or_insert((Vec3::zeros(), 0.0, 0));
            e.0 += p;
            e.1 += inten;
            e.2 += 1;
        }
        let mut points = Vec::with_capacity(cells.len());
        let mut intensity = Vec::with_capacity(cells.len());
        for (sum, isum, n) in cells.into_values() {
            points.push(sum / n as f64);
            intensity.push(isum / n as f64);
        }
        PointCloud { points, intensity: self.intensity.as_ref().map(|_| intensity) }
    }
}

pub fn voxel_key(p: &Vec3, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// PCA oriented bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObbSummary {
    pub center: Vec3,
    /// Unit axes, matching `extents` order.
    pub axes: [Vec3; 3],
    /// Side lengths, sorted descending.
    pub extents: [f64; 3],
}

fn sign_normalize(v: Vec3) -> Vec3 {
    match v.iter().find(|c| c.abs() > 1e-12) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

/// Oriented bounding box whose axes are the eigenvectors of the point
/// covariance and whose extents are the min/max projection ranges.
///
/// A cloud whose points all coincide yields zero extents and the canonical
/// axes. Intensity is ignored.
pub fn oriented_bbox(cloud: &PointCloud) -> Result<ObbSummary, GeomError> {
    let pts = cloud.points();
    if pts.len() < 3 {
        return Err(GeomError::DegenerateInput(format!(
            "oriented bounding box needs at least 3 points, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Mat3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    if cov.abs().max() == 0.0 {
        return Ok(ObbSummary {
            center: mean,
            axes: [Vec3::x(), Vec3::y(), Vec3::z()],
            extents: [0.0; 3],
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut boxes: Vec<(f64, Vec3, f64)> = order
        .iter()
        .map(|&k| {
            let axis = sign_normalize(eig.eigenvectors.column(k).into_owned().normalize());
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in pts {
                let s = (p - mean).dot(&axis);
                lo = lo.min(s);
                hi = hi.max(s);
            }
            (hi - lo, axis, 0.5 * (lo + hi))
        })
        .collect();
    // Stable: equal extents keep eigenvalue order.
    boxes.sort_by(|a, b| b.0.total_cmp(&a.0));

    let center = boxes.iter().fold(mean, |c, (_, axis, mid)| c + axis * *mid);
    Ok(ObbSummary {
        center,
        axes: [boxes[0].1, boxes[1].1, boxes[2].1],
        extents: [boxes[0].0, boxes[1].0, boxes[2].0],
    })
}

/// Least-squares rigid transform (no scale) mapping `source` onto `target`.
pub fn umeyama_align(source: &[Vec3], target: &[Vec3]) -> Result<Pose3, GeomError> {
    if source.len() != target.len() {
        return Err(GeomError::DegenerateInput(format!(
            "correspondence lists differ in length ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(GeomError::DegenerateInput(format!(
            "alignment needs at least 3 correspondences, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let mu_s = source.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mu_t = target.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut h = Mat3::zeros();
    let mut scatter_s = Mat3::zeros();
    let mut scatter_t = Mat3::zeros();
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        h += ds * dt.transpose();
        scatter_s += ds * ds.transpose();
        scatter_t += dt * dt.transpose();
    }
    if is_collinear(&scatter_s) || is_collinear(&scatter_t) {
        return Err(GeomError::DegenerateInput("correspondences are collinear".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeomError::DegenerateInput("SVD failed".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let rot = UnitQuaternion::from_matrix(&r);
    let t = mu_t - rot * mu_s;
    Ok(Pose3::new(rot, t))
}

fn is_collinear(scatter: &Mat3) -> bool {
    let eig = SymmetricEigen::new(*scatter);
    let mut ev = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0].max(1e-300)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;

    pub fn random_pose<R: Rng>(rng: &mut R, max_t: f64) -> Pose3 {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vec3::new(
            rng.random_range(-max_t..max_t),
            rng.random_range(-max_t..max_t),
            rng.random_range(-max_t..max_t),
        );
        Pose3::new(UnitQuaternion::new_normalize(q), t)
    }

    pub fn pose_distance(a: &Pose3, b: &Pose3) -> (f64, f64) {
        let d = a.between(b);
        (d.translation_norm(), d.rotation_angle())
    }
}
