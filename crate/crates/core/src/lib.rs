//! Decentralized two-robot LiDAR SLAM and map merging for tunnel networks.
//!
//! The pipeline runs from a procedural tunnel simulator through scan-matching
//! odometry, place recognition, global registration, robust loop selection
//! and pose-graph optimization, ending in trajectory error evaluation.

pub mod geom;
pub mod simworld;
pub mod spatial;
pub mod frontend;
pub mod graphcore;
pub mod io;
pub mod placerec;
pub mod registration;
pub mod robustsel;
pub mod eval;
pub mod merge;
