use super::world::TunnelWorld;
use super::SimError;
use crate::geom::{PointCloud, Pose3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Spinning multi-beam LiDAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarModel {
    pub channels: usize,
    pub horizontal_steps: usize,
    /// (min, max) elevation in degrees.
    pub vertical_fov: (f64, f64),
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub dropout_prob: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            channels: 16,
            horizontal_steps: 360,
            vertical_fov: (-22.5, 22.5),
            max_range: 40.0,
            range_noise_sigma: 0.01,
            dropout_prob: 0.0,
        }
    }
}

impl LidarModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, reason: &str| {
            Err(SimError::InvalidSpec { field: format!("lidar.{field}"), reason: reason.into() })
        };
        if self.channels == 0 {
            return bad("channels", "must be >= 1");
        }
        if self.horizontal_steps == 0 {
            return bad("horizontal_steps", "must be >= 1");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob", "must lie in [0, 1]");
        }
        if !(self.range_noise_sigma >= 0.0) {
            return bad("range_noise_sigma", "must be >= 0");
        }
        if !(self.vertical_fov.0 <= self.vertical_fov.1) {
            return bad("vertical_fov", "min must not exceed max");
        }
        Ok(())
    }

    /// Unit ray directions in the sensor frame, channel-major.
    pub fn ray_directions(&self) -> Vec<Vec3> {
        let (lo, hi) = (self.vertical_fov.0.to_radians(), self.vertical_fov.1.to_radians());
        let mut dirs = Vec::with_capacity(self.channels * self.horizontal_steps);
        for c in 0..self.channels {
            let elev = if self.channels == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * c as f64 / (self.channels - 1) as f64
            };
            for h in 0..self.horizontal_steps {
                let az = std::f64::consts::TAU * h as f64 / self.horizontal_steps as f64;
                dirs.push(Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()));
            }
        }
        dirs
    }
}

/// Casts every beam of `model` from `sensor_pose` and returns the hits in
/// the sensor frame.
///
/// Each ray consumes exactly one dropout draw and one noise draw from a
/// ChaCha stream seeded by `seed`, so results depend only on
/// `(world, pose, model, seed)`. Intensity falls off with range.
pub fn raycast_scan(
    world: &TunnelWorld,
    sensor_pose: &Pose3,
    model: &LidarModel,
    seed: u64,
) -> Result<PointCloud, SimError> {
    model.validate()?;
    let origin = *sensor_pose.translation();
    if !world.contains(&origin) {
        return Err(SimError::SensorOutsideWorld { x: origin.x, y: origin.y, z: origin.z });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = world.solids_near(&origin, model.max_range);
    let mut scratch = Vec::new();
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for dir in model.ray_directions() {
        let drop: f64 = rng.random();
        let noise: f64 = rng.sample(StandardNormal);
        let world_dir = sensor_pose.rotate_vector(&dir);
        let Some(t) = world.ray_exit_among(&origin, &world_dir, &candidates, &mut scratch) else {
            continue;
        };
        let hit = origin + world_dir * t;
        let range = t + world.surface_offset(&hit) + model.range_noise_sigma * noise;
        if range <= 0.0 || range > model.max_range || drop < model.dropout_prob {
            continue;
        }
        points.push(dir * range);
        intensity.push((-range / 50.0).exp());
    }
    Ok(PointCloud::with_intensity(points, intensity).expect("finite by construction"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::world::{build_world, CrossSection, SegmentSpec, WorldConfig};
    use nalgebra::{UnitQuaternion, Vector3};

    fn straight(r: f64, noise: f64) -> TunnelWorld {
        build_world(&WorldConfig {
            seed: 3,
            surface_noise_sigma: noise,
            roughness_scale: 1.0,
            segments: vec![SegmentSpec {
                start: [-1000.0, 0.0, 0.0],
                end: [1000.0, 0.0, 0.0],
                radius: r,
                cross_section: CrossSection::Circular,
            }],
        })
        .unwrap()
    }

    fn quiet() -> LidarModel {
        LidarModel { range_noise_sigma: 0.0, max_range: 60.0, ..Default::default() }
    }

    #[test]
    fn horizontal_rays_hit_at_radius() {
        let world = straight(2.5, 0.0);
        let model = LidarModel { channels: 1, vertical_fov: (0.0, 0.0), ..quiet() };
        let cloud = raycast_scan(&world, &Pose3::identity(), &model, 0).unwrap();
        // rays within ~2.4° of the axis travel past max range
        assert!(cloud.len() > 300);
        for p in cloud.points() {
            let radial = (p.y * p.y + p.z * p.z).sqrt();
            assert!((radial - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn short_range_sees_nothing() {
        let world = straight(2.5, 0.0);
        let model = LidarModel { max_range: 2.0, ..quiet() };
        assert!(raycast_scan(&world, &Pose3::identity(), &model, 0).unwrap().is_empty());
    }

    #[test]
    fn outside_sensor_is_rejected() {
        let world = straight(2.5, 0.0);
        let pose = Pose3::from_translation(Vec3::new(0.0, 5.0, 0.0));
        assert!(matches!(raycast_scan(&world, &pose, &quiet(), 0), Err(SimError::SensorOutsideWorld { .. })));
    }

    #[test]
    fn yaw_rotation_equivariance() {
        let world = build_world(&WorldConfig {
            seed: 3,
            surface_noise_sigma: 0.03,
            roughness_scale: 1.0,
            segments: vec![
                SegmentSpec { start: [-30.0, 0.0, 0.0], end: [0.0, 0.0, 0.0], radius: 2.5, cross_section: CrossSection::Circular },
                SegmentSpec { start: [0.0, 0.0, 0.0], end: [30.0, 0.0, 0.0], radius: 2.5, cross_section: CrossSection::Circular },
                SegmentSpec { start: [0.0, -30.0, 0.0], end: [0.0, 0.0, 0.0], radius: 2.5, cross_section: CrossSection::Circular },
                SegmentSpec { start: [0.0, 0.0, 0.0], end: [0.0, 30.0, 0.0], radius: 2.5, cross_section: CrossSection::Circular },
            ],
        })
        .unwrap();
        let model = quiet();
        let base_pose = Pose3::from_translation(Vec3::new(1.0, 0.5, 0.0));
        let base = raycast_scan(&world, &base_pose, &model, 9).unwrap();
        let step = std::f64::consts::TAU / model.horizontal_steps as f64;
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 17.0 * step);
        let rotated_pose = base_pose.compose(&Pose3::from_rotation(rot));
        let rotated = raycast_scan(&world, &rotated_pose, &model, 9).unwrap();
        assert_eq!(base.len(), rotated.len());
        let expected: Vec<Vec3> = base.points().iter().map(|p| rot.inverse() * p).collect();
        let grid = crate::spatial::HashGrid::new(rotated.points(), 0.5);
        for p in &expected {
            let (_, d) = grid.nearest(p, 0.5).expect("matching point");
            assert!(d < 1e-6, "{p}: {d}");
        }
    }

    #[test]
    fn zero_noise_points_lie_on_walls() {
        let world = straight(2.5, 0.0);
        let pose = Pose3::from_yaw(0.3, Vec3::new(5.0, 0.4, -0.2));
        let cloud = raycast_scan(&world, &pose, &quiet(), 0).unwrap();
        for p in cloud.points() {
            let w = pose.transform_point(p);
            assert!(((w.y * w.y + w.z * w.z).sqrt() - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_thins_the_scan() {
        let world = straight(2.5, 0.0);
        let full = raycast_scan(&world, &Pose3::identity(), &quiet(), 5).unwrap();
        let half = raycast_scan(&world, &Pose3::identity(), &LidarModel { dropout_prob: 0.5, ..quiet() }, 5).unwrap();
        let ratio = half.len() as f64 / full.len() as f64;
        assert!((ratio - 0.5).abs() < 0.05, "{ratio}");
    }
}
