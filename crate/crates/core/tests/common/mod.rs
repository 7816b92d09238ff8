//! Small simulated fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use tunnelslam::frontend::{apply_tunnel_filter, KeyFrame};
use tunnelslam::geom::{Pose3, Vec3};
use tunnelslam::graphcore::NodeKey;
use tunnelslam::placerec::{attach_descriptors, ScanContextParams};
use tunnelslam::simworld::{
    build_world, raycast_scan, script_trajectories, CrossSection, LidarModel, RouteSpec, SegmentSpec, Trajectory, TrajectoryConfig,
    TunnelWorld, WorldConfig,
};

pub fn seg(start: [f64; 3], end: [f64; 3]) -> SegmentSpec {
    SegmentSpec { start, end, radius: 3.0, cross_section: CrossSection::Circular }
}

/// A 60 m corridor with side branches at x = 20 (north) and x = 40 (south).
pub fn branch_world() -> TunnelWorld {
    build_world(&WorldConfig {
        seed: 9,
        surface_noise_sigma: 0.3,
        roughness_scale: 1.0,
        segments: vec![
            seg([0.0, 0.0, 0.0], [20.0, 0.0, 0.0]),
            seg([20.0, 0.0, 0.0], [40.0, 0.0, 0.0]),
            seg([40.0, 0.0, 0.0], [60.0, 0.0, 0.0]),
            seg([20.0, 0.0, 0.0], [20.0, 25.0, 0.0]),
            seg([40.0, 0.0, 0.0], [40.0, -25.0, 0.0]),
        ],
    })
    .unwrap()
}

pub fn route(id: u32, waypoints: Vec<[f64; 3]>) -> RouteSpec {
    RouteSpec { id, waypoints, speed: 2.0, rate_hz: 5.0, lateral_offset_max: 0.0, sensor_height: 0.0, turn_blend: 1.5 }
}

pub fn trajectories(world: &TunnelWorld, routes: Vec<RouteSpec>) -> Vec<Trajectory> {
    script_trajectories(world, &TrajectoryConfig { seed: 1, robots: routes }).unwrap()
}

/// Keyframes every `spacing` metres of a ground-truth trajectory, with
/// poses expressed in the robot's own start frame, plus their
/// ground-truth poses in the world frame.
pub fn keyframes(world: &TunnelWorld, gt: &Trajectory, spacing: f64) -> (Vec<KeyFrame>, BTreeMap<NodeKey, Pose3>) {
    let model = LidarModel { horizontal_steps: 240, ..LidarModel::default() };
    let origin_inv = gt.poses[0].inverse();
    let mut kfs: Vec<KeyFrame> = Vec::new();
    let mut truth = BTreeMap::new();
    let mut last: Option<Vec3> = None;
    for (k, p) in gt.poses.iter().enumerate() {
        if last.is_some_and(|l| (p.translation() - l).norm() < spacing) {
            continue;
        }
        last = Some(*p.translation());
        let index = kfs.len() as u32;
        let cloud = raycast_scan(world, p, &model, 1000 * gt.robot as u64 + k as u64).unwrap().voxel_downsample(0.4);
        truth.insert(NodeKey::new(gt.robot, index), *p);
        kfs.push(KeyFrame {
            robot: gt.robot,
            index,
            stamp: gt.stamps[k],
            pose: origin_inv.compose(p),
            cloud,
            informative: true,
            descriptor: None,
        });
    }
    attach_descriptors(&mut kfs, &ScanContextParams { max_range: 40.0, ..ScanContextParams::default() }).unwrap();
    apply_tunnel_filter(&mut kfs, 8.0);
    (kfs, truth)
}

/// Copies keyframes under another robot id.
pub fn relabel(kfs: &[KeyFrame], robot: u32) -> Vec<KeyFrame> {
    kfs.iter().map(|k| KeyFrame { robot, ..k.clone() }).collect()
}
