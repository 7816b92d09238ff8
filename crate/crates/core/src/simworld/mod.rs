//! Procedural tunnel networks, simulated LiDAR, scripted robot routes and
//! degraded odometry.

mod lidar;
mod odometry;
mod trajectory;
mod world;

pub use lidar::{raycast_scan, LidarModel};
pub use odometry::{degrade_odometry, OdometryModel, OdometryStream};
pub use trajectory::{script_trajectories, RouteSpec, Trajectory, TrajectoryConfig};
pub use world::{build_world, CrossSection, Junction, Segment, SegmentSpec, TunnelWorld, WorldConfig};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid spec field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("sensor at ({x:.3}, {y:.3}, {z:.3}) is outside every tunnel")]
    SensorOutsideWorld { x: f64, y: f64, z: f64 },
    #[error("robot {robot}: waypoint or sample {index} is outside the tunnels")]
    WaypointOutsideWorld { robot: u32, index: usize },
}
