//! Per-robot front end: point-to-point ICP odometry against a sliding local
//! map, keyframe selection and the bounding-box tunnel filter.

use crate::geom::{oriented_bbox, umeyama_align, GeomError, PointCloud, Pose3, Vec3};
use crate::graphcore::NodeKey;
use crate::placerec::ScanContext;
use crate::registration::normals_for_points;
use crate::simworld::Trajectory;
use crate::spatial::HashGrid;
use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("cloud is empty after downsampling")]
    EmptyCloud,
    #[error("no correspondences within {0} m at the initial guess")]
    NoCorrespondences(f64),
    #[error("{scans} scans but {wheel} wheel increments (expected scans - 1)")]
    StreamLengthMismatch { scans: usize, wheel: usize },
    #[error("kinematic mode requires a wheel odometry stream")]
    MissingWheel,
    #[error("invalid odometry config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdometryMode {
    /// LiDAR only, constant-velocity initial guess.
    Unconstrained,
    /// Wheel-initialized, planar, with the wheel estimate substituted along
    /// directions the scan geometry does not constrain.
    Kinematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryConfig {
    pub mode: OdometryMode,
    pub max_correspondence_dist: f64,
    /// Voxel size applied to both clouds before matching; 0 disables it.
    pub voxel_size: f64,
    pub max_iterations: usize,
    pub convergence_eps: f64,
    /// Kinematic mode: a horizontal direction whose normal-information
    /// eigenvalue falls below this fraction of the largest is degenerate.
    pub degeneracy_ratio: f64,
    /// Kinematic mode: radius for the surface normals of each scan.
    pub normal_radius: f64,
    /// Number of past scans, placed at their estimated poses, that form the
    /// registration target. 1 gives plain scan-to-scan matching.
    pub local_map_scans: usize,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            mode: OdometryMode::Kinematic,
            max_correspondence_dist: 1.0,
            voxel_size: 0.5,
            max_iterations: 30,
            convergence_eps: 1e-4,
            degeneracy_ratio: 0.3,
            normal_radius: 1.2,
            local_map_scans: 10,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        let bad = |m: &str| Err(FrontendError::InvalidConfig(m.into()));
        if !(self.max_correspondence_dist > 0.0) {
            return bad("max_correspondence_dist must be positive");
        }
        if !(self.voxel_size >= 0.0) {
            return bad("voxel_size must be >= 0");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1");
        }
        if !(self.convergence_eps > 0.0) {
            return bad("convergence_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.degeneracy_ratio) {
            return bad("degeneracy_ratio must lie in [0, 1)");
        }
        if !(self.normal_radius > 0.0) {
            return bad("normal_radius must be positive");
        }
        if self.local_map_scans == 0 {
            return bad("local_map_scans must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub pose: Pose3,
    /// Fraction of source points with a target neighbour within the
    /// correspondence distance at the final pose.
    pub fitness: f64,
    pub rmse: f64,
    pub iterations: usize,
}

/// A downsampled cloud ready to serve as an ICP target.
struct Target {
    points: Vec<Vec3>,
}

impl Target {
    fn new(cloud: &PointCloud, cfg: &OdometryConfig) -> Result<Self, FrontendError> {
        let points = cloud.voxel_downsample(cfg.voxel_size).points().to_vec();
        if points.is_empty() {
            return Err(FrontendError::EmptyCloud);
        }
        Ok(Self { points })
    }
}

/// Point-to-point ICP of `source` onto `target` starting from `init`.
///
/// Returns the pose mapping source coordinates into the target frame.
pub fn icp_register(source: &PointCloud, target: &PointCloud, init: &Pose3, cfg: &OdometryConfig) -> Result<IcpResult, FrontendError> {
    cfg.validate()?;
    let src = source.voxel_downsample(cfg.voxel_size).points().to_vec();
    if src.is_empty() {
        return Err(FrontendError::EmptyCloud);
    }
    let tgt = Target::new(target, cfg)?;
    let (res, _) = icp_core(&src, &tgt, init, cfg)?;
    Ok(res)
}

/// Returns the result and the final correspondences as (source, target)
/// index pairs.
fn icp_core(src: &[Vec3], tgt: &Target, init: &Pose3, cfg: &OdometryConfig) -> Result<(IcpResult, Vec<(usize, usize)>), FrontendError> {
    let grid = HashGrid::new(&tgt.points, cfg.max_correspondence_dist);
    let mut pose = *init;
    let mut iterations = 0;
    let mut a = Vec::with_capacity(src.len());
    let mut b = Vec::with_capacity(src.len());
    for it in 0..cfg.max_iterations {
        a.clear();
        b.clear();
        for p in src {
            if let Some((j, _)) = grid.nearest(&pose.transform_point(p), cfg.max_correspondence_dist) {
                a.push(*p);
                b.push(tgt.points[j]);
            }
        }
        if it == 0 && a.is_empty() {
            return Err(FrontendError::NoCorrespondences(cfg.max_correspondence_dist));
        }
        let Ok(mut next) = umeyama_align(&a, &b) else { break };
        if cfg.mode == OdometryMode::Kinematic {
            next = planar_like(&next, init);
        }
        let step = pose.between(&next);
        pose = next;
        iterations = it + 1;
        if step.translation_norm() < cfg.convergence_eps && step.rotation_angle() < cfg.convergence_eps {
            break;
        }
    }
    let mut pairs = Vec::new();
    let mut sq = 0.0;
    for (i, p) in src.iter().enumerate() {
        if let Some((j, d)) = grid.nearest(&pose.transform_point(p), cfg.max_correspondence_dist) {
            pairs.push((i, j));
            sq += d * d;
        }
    }
    let fitness = pairs.len() as f64 / src.len() as f64;
    let rmse = if pairs.is_empty() { 0.0 } else { (sq / pairs.len() as f64).sqrt() };
    Ok((IcpResult { pose, fitness, rmse, iterations }, pairs))
}

/// Keeps yaw and horizontal translation of `pose`; height comes from `prior`.
fn planar_like(pose: &Pose3, prior: &Pose3) -> Pose3 {
    let t = pose.translation();
    Pose3::from_yaw(pose.yaw(), Vec3::new(t.x, t.y, prior.translation().z))
}

/// Replaces the horizontal translation of `icp` by the wheel estimate along
/// every direction that the matched target normals leave unconstrained.
fn remap_degenerate(icp: &Pose3, wheel: &Pose3, normals: &[Vec3], ratio: f64) -> Pose3 {
    let mut info = Matrix2::zeros();
    for n in normals {
        let h = Vector2::new(n.x, n.y);
        info += h * h.transpose();
    }
    let eig = SymmetricEigen::new(info);
    let lmax = eig.eigenvalues.max();
    let mut t = *icp.translation();
    let dt = wheel.translation() - icp.translation();
    let dt2 = Vector2::new(dt.x, dt.y);
    for k in 0..2 {
        if lmax <= 0.0 || eig.eigenvalues[k] < ratio * lmax {
            let e = eig.eigenvectors.column(k).into_owned();
            let shift = e * e.dot(&dt2);
            t.x += shift.x;
            t.y += shift.y;
        }
    }
    Pose3::new(*icp.rotation(), t)
}

/// Registers every scan against the union of the previous
/// `local_map_scans` scans placed at their estimated poses, giving a
/// trajectory in the frame of the first scan. `wheel[k]` is the wheel
/// increment from scan `k` to `k + 1`.
///
/// A sparse multi-beam scan repeats the same ring pattern in the sensor
/// frame at every pose, which pulls plain scan-to-scan matching towards
/// zero motion; the local map smears the rings out.
pub fn run_odometry(
    robot: u32,
    stamps: &[f64],
    scans: &[PointCloud],
    wheel: Option<&[Pose3]>,
    cfg: &OdometryConfig,
) -> Result<Trajectory, FrontendError> {
    cfg.validate()?;
    if stamps.len() != scans.len() {
        return Err(FrontendError::StreamLengthMismatch { scans: scans.len(), wheel: stamps.len() });
    }
    let kinematic = cfg.mode == OdometryMode::Kinematic;
    if kinematic {
        let w = wheel.ok_or(FrontendError::MissingWheel)?;
        if w.len() + 1 != scans.len() && !scans.is_empty() {
            return Err(FrontendError::StreamLengthMismatch { scans: scans.len(), wheel: w.len() });
        }
    }
    let mut poses = Vec::with_capacity(scans.len());
    if scans.is_empty() {
        return Ok(Trajectory::new(robot, Vec::new(), poses));
    }
    let downsample = |c: &PointCloud| -> Result<Vec<Vec3>, FrontendError> {
        let pts = c.voxel_downsample(cfg.voxel_size).points().to_vec();
        if pts.is_empty() {
            return Err(FrontendError::EmptyCloud);
        }
        Ok(pts)
    };
    poses.push(Pose3::identity());
    // world-frame points of the most recent scans
    let mut window: std::collections::VecDeque<Vec<Vec3>> = std::collections::VecDeque::new();
    window.push_back(downsample(&scans[0])?);
    let mut velocity = Pose3::identity();
    for k in 1..scans.len() {
        let current = downsample(&scans[k])?;
        let all: Vec<Vec3> = window.iter().flatten().copied().collect();
        let map = PointCloud::new(all)?.voxel_downsample(cfg.voxel_size);
        let target = Target { points: map.points().to_vec() };
        let last = *poses.last().unwrap();
        let inc = if kinematic {
            let w = wheel.unwrap()[k - 1];
            let (res, pairs) = icp_core(&current, &target, &last.compose(&w), cfg)?;
            let inc = last.between(&res.pose);
            let normals = normals_for_points(&current, cfg.normal_radius);
            let rot = inc.rotation();
            let matched: Vec<Vec3> = pairs.iter().filter_map(|&(i, _)| normals[i].map(|n| rot * n)).collect();
            remap_degenerate(&inc, &w, &matched, cfg.degeneracy_ratio)
        } else {
            let res = icp_core(&current, &target, &last.compose(&velocity), cfg)?.0;
            last.between(&res.pose)
        };
        velocity = inc;
        let next = last.compose(&inc);
        window.push_back(current.iter().map(|p| next.transform_point(p)).collect());
        if window.len() > cfg.local_map_scans {
            window.pop_front();
        }
        poses.push(next);
    }
    Ok(Trajectory::new(robot, stamps.to_vec(), poses))
}

/// A stored pose and cloud, the unit of mapping and inter-robot exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFrame {
    pub robot: u32,
    pub index: u32,
    pub stamp: f64,
    /// Odometry-frame pose.
    pub pose: Pose3,
    /// Sensor-frame cloud, voxel-downsampled.
    pub cloud: PointCloud,
    pub informative: bool,
    #[serde(default)]
    pub descriptor: Option<ScanContext>,
}

impl KeyFrame {
    pub fn key(&self) -> NodeKey {
        NodeKey::new(self.robot, self.index)
    }
}

/// Emits a keyframe at the first pose and then whenever the robot has moved
/// at least `keyframe_distance` from the previous keyframe.
pub fn select_keyframes(traj: &Trajectory, scans: &[PointCloud], keyframe_distance: f64, voxel_size: f64) -> Vec<KeyFrame> {
    assert!(keyframe_distance > 0.0, "keyframe distance must be positive");
    assert_eq!(traj.len(), scans.len(), "one scan per pose");
    let mut out: Vec<KeyFrame> = Vec::new();
    for (k, pose) in traj.poses.iter().enumerate() {
        let take = match out.last() {
            None => true,
            Some(last) => (pose.translation() - last.pose.translation()).norm() >= keyframe_distance,
        };
        if take {
            out.push(KeyFrame {
                robot: traj.robot,
                index: out.len() as u32,
                stamp: traj.stamps[k],
                pose: *pose,
                cloud: scans[k].voxel_downsample(voxel_size),
                informative: true,
                descriptor: None,
            });
        }
    }
    out
}

/// True when the second-largest bounding-box extent of the keyframe cloud
/// reaches `width_threshold`; false flags a corridor-only view.
pub fn tunnel_filter(kf: &KeyFrame, width_threshold: f64) -> Result<bool, GeomError> {
    let obb = oriented_bbox(&kf.cloud)?;
    Ok(obb.extents[1] >= width_threshold)
}

/// Sets `informative` on every keyframe. Keyframes with too few points for
/// a bounding box are treated as uninformative.
pub fn apply_tunnel_filter(kfs: &mut [KeyFrame], width_threshold: f64) {
    for kf in kfs {
        kf.informative = tunnel_filter(kf, width_threshold).unwrap_or(false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::testutil::random_pose;
    use crate::simworld::{build_world, raycast_scan, CrossSection, LidarModel, SegmentSpec, TunnelWorld, WorldConfig};
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(start: [f64; 3], end: [f64; 3], radius: f64) -> SegmentSpec {
        SegmentSpec { start, end, radius, cross_section: CrossSection::Circular }
    }

    fn cross_world() -> TunnelWorld {
        build_world(&WorldConfig {
            seed: 1,
            surface_noise_sigma: 0.02,
            roughness_scale: 1.0,
            segments: vec![
                seg([-40.0, 0.0, 0.0], [0.0, 0.0, 0.0], 4.0),
                seg([0.0, 0.0, 0.0], [40.0, 0.0, 0.0], 4.0),
                seg([0.0, -15.0, 0.0], [0.0, 0.0, 0.0], 4.0),
                seg([0.0, 0.0, 0.0], [0.0, 15.0, 0.0], 4.0),
            ],
        })
        .unwrap()
    }

    fn corridor_world() -> TunnelWorld {
        build_world(&WorldConfig {
            seed: 1,
            surface_noise_sigma: 0.0,
            roughness_scale: 1.0,
            segments: vec![seg([-500.0, 0.0, 0.0], [500.0, 0.0, 0.0], 4.0)],
        })
        .unwrap()
    }

    fn scan(world: &TunnelWorld, pose: &Pose3) -> PointCloud {
        let model = LidarModel { range_noise_sigma: 0.0, ..Default::default() };
        raycast_scan(world, pose, &model, 0).unwrap()
    }

    fn cfg(mode: OdometryMode) -> OdometryConfig {
        OdometryConfig { mode, max_iterations: 60, ..Default::default() }
    }

    #[test]
    fn identical_clouds_register_to_identity() {
        let world = cross_world();
        let c = scan(&world, &Pose3::from_translation(Vec3::new(2.0, 1.0, 0.0)));
        let res = icp_register(&c, &c, &Pose3::identity(), &cfg(OdometryMode::Unconstrained)).unwrap();
        assert!(res.pose.translation_norm() < 1e-9 && res.pose.rotation_angle() < 1e-9);
        assert_eq!(res.fitness, 1.0);
    }

    #[test]
    fn recovers_small_perturbation_at_junction() {
        let world = cross_world();
        let source = scan(&world, &Pose3::from_translation(Vec3::new(1.0, 0.5, 0.0)));
        let t = Pose3::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 5f64.to_radians()), Vec3::new(0.15, -0.12, 0.05));
        let target = source.transformed(&t);
        let cfg = OdometryConfig { voxel_size: 0.0, ..cfg(OdometryMode::Unconstrained) };
        let res = icp_register(&source, &target, &Pose3::identity(), &cfg).unwrap();
        let err = res.pose.between(&t);
        assert!(err.translation_norm() < 0.01, "{}", err.translation_norm());
        assert!(err.rotation_angle() < 0.5f64.to_radians());
    }

    #[test]
    fn corridor_slides_axially() {
        // Scans 0.6 m apart along a featureless corridor are identical in the
        // sensor frame, so ICP reports no motion at all.
        let world = corridor_world();
        let a = scan(&world, &Pose3::identity());
        let b = scan(&world, &Pose3::from_translation(Vec3::new(0.6, 0.0, 0.0)));
        let res = icp_register(&b, &a, &Pose3::identity(), &cfg(OdometryMode::Unconstrained)).unwrap();
        assert!((res.pose.translation().x - 0.6).abs() > 0.5);
    }

    #[test]
    fn icp_is_equivariant() {
        let world = cross_world();
        let source = scan(&world, &Pose3::from_translation(Vec3::new(1.0, 0.5, 0.0)));
        let target = scan(&world, &Pose3::from_yaw(0.05, Vec3::new(1.3, 0.4, 0.0)));
        let cfg = OdometryConfig { voxel_size: 0.0, max_iterations: 10, ..cfg(OdometryMode::Unconstrained) };
        let base = icp_register(&source, &target, &Pose3::identity(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let g = random_pose(&mut rng, 20.0);
            let moved = icp_register(&source, &target.transformed(&g), &g, &cfg).unwrap();
            let expect = g.compose(&base.pose);
            assert!((moved.pose.to_matrix() - expect.to_matrix()).abs().max() < 1e-6);
        }
    }

    #[test]
    fn empty_cloud_rejected() {
        let c = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        assert_eq!(
            icp_register(&PointCloud::empty(), &c, &Pose3::identity(), &OdometryConfig::default()),
            Err(FrontendError::EmptyCloud)
        );
        let far = PointCloud::new(vec![Vec3::new(100.0, 0.0, 0.0)]).unwrap();
        assert!(matches!(
            icp_register(&far, &c, &Pose3::identity(), &OdometryConfig::default()),
            Err(FrontendError::NoCorrespondences(_))
        ));
    }

    #[test]
    fn kinematic_needs_wheel() {
        let c = vec![PointCloud::new(vec![Vec3::zeros()]).unwrap(); 2];
        assert_eq!(
            run_odometry(0, &[0.0, 0.1], &c, None, &cfg(OdometryMode::Kinematic)),
            Err(FrontendError::MissingWheel)
        );
        assert!(matches!(
            run_odometry(0, &[0.0, 0.1], &c, Some(&[]), &cfg(OdometryMode::Kinematic)),
            Err(FrontendError::StreamLengthMismatch { .. })
        ));
    }

    #[test]
    fn kinematic_uses_wheel_in_corridor() {
        let world = corridor_world();
        let poses: Vec<Pose3> = (0..20).map(|k| Pose3::from_translation(Vec3::new(0.2 * k as f64, 0.0, 0.0))).collect();
        let scans: Vec<PointCloud> = poses.iter().map(|p| scan(&world, p)).collect();
        let stamps: Vec<f64> = (0..20).map(|k| 0.1 * k as f64).collect();
        let wheel: Vec<Pose3> = poses.windows(2).map(|w| w[0].between(&w[1])).collect();
        let kin = run_odometry(0, &stamps, &scans, Some(&wheel), &cfg(OdometryMode::Kinematic)).unwrap();
        assert!((kin.poses[19].translation().x - 3.8).abs() < 0.05);
        let free = run_odometry(0, &stamps, &scans, None, &cfg(OdometryMode::Unconstrained)).unwrap();
        assert!(free.poses[19].translation().x < 1.0);
    }

    #[test]
    fn identical_scans_do_not_move() {
        let world = cross_world();
        let c = scan(&world, &Pose3::identity());
        let traj = run_odometry(0, &[0.0, 0.1], &[c.clone(), c], None, &cfg(OdometryMode::Unconstrained)).unwrap();
        assert!(traj.poses[1].translation_norm() < 1e-9);
    }

    fn line(xs: &[f64]) -> (Trajectory, Vec<PointCloud>) {
        let poses = xs.iter().map(|&x| Pose3::from_translation(Vec3::new(x, 0.0, 0.0))).collect();
        let stamps = (0..xs.len()).map(|i| i as f64).collect();
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, (i * i) as f64, 1.0)).collect();
        (Trajectory::new(0, stamps, poses), vec![PointCloud::new(pts).unwrap(); xs.len()])
    }

    #[test]
    fn keyframe_selection_by_distance() {
        let (t, s) = line(&[0.0, 0.3, 0.6, 1.1]);
        let kfs = select_keyframes(&t, &s, 0.5, 0.0);
        let xs: Vec<f64> = kfs.iter().map(|k| k.pose.translation().x).collect();
        assert_eq!(xs, vec![0.0, 0.6, 1.1]);
        assert_eq!(kfs.iter().map(|k| k.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        let (t, s) = line(&[0.0, 0.2, 0.49]);
        assert_eq!(select_keyframes(&t, &s, 0.5, 0.0).len(), 1);
    }

    #[test]
    fn tunnel_filter_separates_corridor_and_junction() {
        let narrow = build_world(&WorldConfig {
            seed: 0,
            surface_noise_sigma: 0.0,
            roughness_scale: 1.0,
            segments: vec![
                SegmentSpec { start: [-60.0, 0.0, 0.0], end: [0.0, 0.0, 0.0], radius: 4.0, cross_section: CrossSection::Rectangular { width: 8.0, height: 5.0 } },
                SegmentSpec { start: [0.0, 0.0, 0.0], end: [60.0, 0.0, 0.0], radius: 4.0, cross_section: CrossSection::Rectangular { width: 8.0, height: 5.0 } },
                SegmentSpec { start: [0.0, -15.0, 0.0], end: [0.0, 0.0, 0.0], radius: 4.0, cross_section: CrossSection::Rectangular { width: 8.0, height: 5.0 } },
                SegmentSpec { start: [0.0, 0.0, 0.0], end: [0.0, 15.0, 0.0], radius: 4.0, cross_section: CrossSection::Rectangular { width: 8.0, height: 5.0 } },
            ],
        })
        .unwrap();
        let mk = |p: Pose3| KeyFrame {
            robot: 0,
            index: 0,
            stamp: 0.0,
            pose: p,
            cloud: scan(&narrow, &p).voxel_downsample(0.5),
            informative: true,
            descriptor: None,
        };
        let corridor = mk(Pose3::from_translation(Vec3::new(-45.0, 0.0, 0.0)));
        let junction = mk(Pose3::identity());
        assert!(!tunnel_filter(&corridor, 10.0).unwrap());
        assert!(tunnel_filter(&junction, 10.0).unwrap());
        assert!(tunnel_filter(&corridor, 0.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let g = random_pose(&mut rng, 30.0);
            let moved = KeyFrame { cloud: junction.cloud.transformed(&g), ..junction.clone() };
            assert!(tunnel_filter(&moved, 10.0).unwrap());
        }
    }
}
