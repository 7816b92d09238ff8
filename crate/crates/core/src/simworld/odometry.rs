use super::trajectory::Trajectory;
use crate::geom::{Pose3, Vec3};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Proprioceptive odometry error models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
pub enum OdometryModel {
    Ideal,
    /// Forward scale bias plus random walk along the direction of travel.
    DriftAxial { bias_per_m: f64, sigma: f64 },
    /// Wheel odometry: slip noise on distance and heading. With `planar` the
    /// increments lose their roll, pitch and vertical components.
    WheelConstrained { planar: bool, slip_sigma: f64 },
}

/// Dead-reckoned increments: one per consecutive pose pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryStream {
    pub robot: u32,
    pub stamps: Vec<f64>,
    pub increments: Vec<Pose3>,
}

impl OdometryStream {
    /// Chains the increments from `start`.
    pub fn integrate(&self, start: Pose3) -> Vec<Pose3> {
        let mut out = Vec::with_capacity(self.increments.len() + 1);
        out.push(start);
        for inc in &self.increments {
            let next = out.last().unwrap().compose(inc);
            out.push(next);
        }
        out
    }
}

/// Corrupts the ground-truth increments of `gt` according to `model`.
pub fn degrade_odometry(gt: &Trajectory, model: &OdometryModel, seed: u64) -> OdometryStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(gt.robot as u64 + 1);
    let increments = gt
        .increments()
        .into_iter()
        .map(|inc| degrade_increment(&inc, model, &mut rng))
        .collect();
    OdometryStream { robot: gt.robot, stamps: gt.stamps.clone(), increments }
}

fn degrade_increment(inc: &Pose3, model: &OdometryModel, rng: &mut ChaCha8Rng) -> Pose3 {
    match *model {
        OdometryModel::Ideal => *inc,
        OdometryModel::DriftAxial { bias_per_m, sigma } => {
            let t = inc.translation();
            let d = t.norm();
            let n: f64 = rng.sample(StandardNormal);
            if d <= 0.0 {
                return *inc;
            }
            let along = t / d;
            let extra = bias_per_m * d + sigma * d.sqrt() * n;
            Pose3::new(*inc.rotation(), t + along * extra)
        }
        OdometryModel::WheelConstrained { planar, slip_sigma } => {
            let t = *inc.translation();
            let d = t.norm();
            let n_dist: f64 = rng.sample(StandardNormal);
            let n_yaw: f64 = rng.sample(StandardNormal);
            let scale = 1.0 + slip_sigma * n_dist;
            let yaw_noise = slip_sigma * d * n_yaw;
            let noisy = Pose3::new(
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_noise) * inc.rotation(),
                t * scale,
            );
            if planar {
                let t = noisy.translation();
                Pose3::from_yaw(noisy.yaw(), Vec3::new(t.x, t.y, 0.0))
            } else {
                noisy
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_traj() -> Trajectory {
        let n = 101;
        let poses = (0..n).map(|i| Pose3::from_yaw(0.01 * i as f64, Vec3::new(0.2 * i as f64, 0.0, 0.05 * i as f64))).collect();
        Trajectory::new(0, (0..n).map(|i| i as f64 * 0.1).collect(), poses)
    }

    #[test]
    fn ideal_reproduces_ground_truth() {
        let gt = line_traj();
        let odo = degrade_odometry(&gt, &OdometryModel::Ideal, 1);
        let chain = odo.integrate(gt.poses[0]);
        for (a, b) in chain.iter().zip(&gt.poses) {
            assert!(a.between(b).log().norm() < 1e-9);
        }
    }

    #[test]
    fn axial_bias_stretches_path() {
        let gt = line_traj();
        let odo = degrade_odometry(&gt, &OdometryModel::DriftAxial { bias_per_m: 0.05, sigma: 0.0 }, 1);
        let len: f64 = odo.increments.iter().map(|p| p.translation_norm()).sum();
        assert!((len / gt.path_length() - 1.05).abs() < 1e-9);
    }

    #[test]
    fn planar_wheel_has_no_vertical_motion() {
        let gt = line_traj();
        let odo = degrade_odometry(&gt, &OdometryModel::WheelConstrained { planar: true, slip_sigma: 0.01 }, 7);
        for inc in &odo.increments {
            assert_eq!(inc.translation().z, 0.0);
            assert!((inc.rotation_angle() - inc.yaw().abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let gt = line_traj();
        let m = OdometryModel::WheelConstrained { planar: false, slip_sigma: 0.02 };
        assert_eq!(degrade_odometry(&gt, &m, 3), degrade_odometry(&gt, &m, 3));
        assert_ne!(degrade_odometry(&gt, &m, 3), degrade_odometry(&gt, &m, 4));
    }
}
