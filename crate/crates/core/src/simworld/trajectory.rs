use super::world::TunnelWorld;
use super::SimError;
use crate::geom::{Pose3, Vec3};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A robot's scripted route through the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub id: u32,
    /// Polyline vertices, normally segment endpoints or junction points.
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    /// A constant lateral offset is drawn uniformly from ±this value.
    #[serde(default)]
    pub lateral_offset_max: f64,
    /// Sensor height above the waypoint polyline.
    #[serde(default)]
    pub sensor_height: f64,
    /// Half-length of the chord used to smooth the heading through corners.
    #[serde(default = "default_blend")]
    pub turn_blend: f64,
}

fn default_speed() -> f64 {
    1.87
}
fn default_rate() -> f64 {
    10.0
}
fn default_blend() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    #[serde(default)]
    pub seed: u64,
    pub robots: Vec<RouteSpec>,
}

/// Ground-truth (or estimated) sensor poses with timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub robot: u32,
    pub stamps: Vec<f64>,
    pub poses: Vec<Pose3>,
}

impl Trajectory {
    pub fn new(robot: u32, stamps: Vec<f64>, poses: Vec<Pose3>) -> Self {
        assert_eq!(stamps.len(), poses.len(), "one stamp per pose");
        Self { robot, stamps, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn path_length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].translation() - w[0].translation()).norm()).sum()
    }

    pub fn duration(&self) -> f64 {
        match (self.stamps.first(), self.stamps.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    pub fn average_speed(&self) -> f64 {
        let d = self.duration();
        if d > 0.0 {
            self.path_length() / d
        } else {
            0.0
        }
    }

    /// Relative motions between consecutive poses.
    pub fn increments(&self) -> Vec<Pose3> {
        self.poses.windows(2).map(|w| w[0].between(&w[1])).collect()
    }
}

struct Polyline {
    points: Vec<Vec3>,
    cumulative: Vec<f64>,
}

impl Polyline {
    fn new(points: Vec<Vec3>) -> Self {
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + (w[1] - w[0]).norm());
        }
        Self { points, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn at(&self, s: f64) -> Vec3 {
        let s = s.clamp(0.0, self.length());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => return self.points[i],
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let span = self.cumulative[i + 1] - self.cumulative[i];
        let f = if span > 0.0 { (s - self.cumulative[i]) / span } else { 0.0 };
        self.points[i] + (self.points[i + 1] - self.points[i]) * f
    }
}

fn heading_rotation(dir: &Vec3) -> UnitQuaternion<f64> {
    let yaw = dir.y.atan2(dir.x);
    let pitch = -dir.z.atan2((dir.x * dir.x + dir.y * dir.y).sqrt());
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw) * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch)
}

/// Samples each route at its rate with constant speed. Headings follow the
/// polyline, smoothed through corners.
pub fn script_trajectories(world: &TunnelWorld, spec: &TrajectoryConfig) -> Result<Vec<Trajectory>, SimError> {
    let mut out = Vec::with_capacity(spec.robots.len());
    for route in &spec.robots {
        out.push(script_one(world, route, spec.seed)?);
    }
    Ok(out)
}

fn script_one(world: &TunnelWorld, route: &RouteSpec, seed: u64) -> Result<Trajectory, SimError> {
    let field = |f: &str| format!("robots[id={}].{f}", route.id);
    if route.waypoints.len() < 2 {
        return Err(SimError::InvalidSpec { field: field("waypoints"), reason: "need at least two waypoints".into() });
    }
    if !(route.speed > 0.0) || !(route.rate_hz > 0.0) || !(route.turn_blend > 0.0) {
        return Err(SimError::InvalidSpec {
            field: field("speed"),
            reason: "speed, rate_hz and turn_blend must be positive".into(),
        });
    }
    let lift = Vec3::new(0.0, 0.0, route.sensor_height);
    let mut pts = Vec::with_capacity(route.waypoints.len());
    for (i, w) in route.waypoints.iter().enumerate() {
        let p = Vec3::from(*w);
        if !world.contains(&(p + lift)) {
            return Err(SimError::WaypointOutsideWorld { robot: route.id, index: i });
        }
        pts.push(p);
    }
    let line = Polyline::new(pts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(route.id as u64 + 1);
    let lateral = if route.lateral_offset_max > 0.0 {
        rng.random_range(-route.lateral_offset_max..=route.lateral_offset_max)
    } else {
        0.0
    };

    let duration = line.length() / route.speed;
    let n = (duration * route.rate_hz + 1e-9).floor() as usize + 1;
    let mut stamps = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / route.rate_hz;
        let s = route.speed * t;
        let dir = line.at(s + route.turn_blend) - line.at(s - route.turn_blend);
        let rot = heading_rotation(&dir.normalize());
        let left = rot * Vec3::y();
        let left = Vec3::new(left.x, left.y, 0.0);
        let pos = line.at(s) + lift + left * lateral;
        if !world.contains(&pos) {
            return Err(SimError::WaypointOutsideWorld { robot: route.id, index: k });
        }
        stamps.push(t);
        poses.push(Pose3::new(rot, pos));
    }
    Ok(Trajectory::new(route.id, stamps, poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::world::{build_world, CrossSection, SegmentSpec, WorldConfig};

    fn route(id: u32, waypoints: Vec<[f64; 3]>) -> RouteSpec {
        RouteSpec { id, waypoints, speed: 2.0, rate_hz: 10.0, lateral_offset_max: 0.0, sensor_height: 0.0, turn_blend: 1.5 }
    }

    fn l_world() -> TunnelWorld {
        build_world(&WorldConfig {
            seed: 0,
            surface_noise_sigma: 0.0,
            roughness_scale: 1.0,
            segments: vec![
                SegmentSpec { start: [0.0, 0.0, 0.0], end: [100.0, 0.0, 0.0], radius: 2.5, cross_section: CrossSection::Circular },
                SegmentSpec { start: [100.0, 0.0, 0.0], end: [100.0, 60.0, 0.0], radius: 2.5, cross_section: CrossSection::Circular },
            ],
        })
        .unwrap()
    }

    #[test]
    fn straight_corridor_sampling() {
        let w = l_world();
        let cfg = TrajectoryConfig { seed: 0, robots: vec![route(0, vec![[1.0, 0.0, 0.0], [97.0, 0.0, 0.0]])] };
        let traj = &script_trajectories(&w, &cfg).unwrap()[0];
        assert_eq!(traj.len(), 481);
        assert!((traj.path_length() - 96.0).abs() < 1e-9);
        assert!((traj.duration() - 48.0).abs() < 1e-9);
        assert!((traj.average_speed() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn corner_is_smooth_and_inside() {
        let w = l_world();
        let mut r = route(1, vec![[2.0, 0.0, 0.0], [100.0, 0.0, 0.0], [100.0, 58.0, 0.0]]);
        r.lateral_offset_max = 0.5;
        let cfg = TrajectoryConfig { seed: 4, robots: vec![r] };
        let traj = &script_trajectories(&w, &cfg).unwrap()[0];
        let step = 2.0 / 10.0;
        for win in traj.poses.windows(2) {
            let d = win[0].between(&win[1]);
            assert!(d.translation_norm() <= 1.5 * step);
            assert!(d.rotation_angle() < 0.2);
        }
        let sum: f64 = traj.increments().iter().map(|p| p.translation_norm()).sum();
        assert!((sum - traj.path_length()).abs() < 1e-6);
    }

    #[test]
    fn distinct_starts() {
        let w = l_world();
        let cfg = TrajectoryConfig {
            seed: 0,
            robots: vec![
                route(0, vec![[5.0, 0.0, 0.0], [90.0, 0.0, 0.0]]),
                route(1, vec![[100.0, 55.0, 0.0], [100.0, 10.0, 0.0]]),
            ],
        };
        let trajs = script_trajectories(&w, &cfg).unwrap();
        let s0 = w.segment_at(trajs[0].poses[0].translation());
        let s1 = w.segment_at(trajs[1].poses[0].translation());
        assert_ne!(s0, s1);
    }

    #[test]
    fn waypoint_outside_is_rejected() {
        let w = l_world();
        let cfg = TrajectoryConfig { seed: 0, robots: vec![route(3, vec![[0.5, 0.0, 0.0], [50.0, 20.0, 0.0]])] };
        assert!(matches!(
            script_trajectories(&w, &cfg),
            Err(SimError::WaypointOutsideWorld { robot: 3, index: 1 })
        ));
    }
}
