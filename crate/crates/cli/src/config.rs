//! Experiment configuration: one TOML file describing the world, the robots
//! and every pipeline stage. Unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tunnelslam::eval::ClassifyConfig;
use tunnelslam::frontend::OdometryConfig;
use tunnelslam::graphcore::OptimizeConfig;
use tunnelslam::merge::MergeConfig;
use tunnelslam::placerec::{MatchConfig, ScanContextParams};
use tunnelslam::registration::RegistrationConfig;
use tunnelslam::robustsel::DEFAULT_GAMMA;
use tunnelslam::simworld::{LidarModel, OdometryModel, RouteSpec, WorldConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    #[serde(default)]
    pub lidar: LidarModel,
    pub robots: Vec<RouteSpec>,
    /// Error model of the wheel odometry that kinematic mode consumes.
    pub wheel: OdometryModel,
    pub frontend: FrontendSection,
    #[serde(default)]
    pub placerec: PlacerecSection,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub eval: ClassifyConfig,
    /// Seeds for noise, lateral offsets and scan dropout. The first one is
    /// used when no `--seed` is given.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendSection {
    #[serde(default)]
    pub odometry: OdometryConfig,
    #[serde(default = "default_keyframe_distance")]
    pub keyframe_distance: f64,
    /// Voxel size of stored keyframe clouds.
    #[serde(default = "default_keyframe_voxel")]
    pub keyframe_voxel: f64,
    /// Second bounding-box extent below which a keyframe counts as
    /// corridor-only. World dependent, so it has no default.
    pub tunnel_width_threshold: f64,
}

fn default_keyframe_distance() -> f64 {
    0.5
}
fn default_keyframe_voxel() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacerecSection {
    pub scan_context: ScanContextParams,
    pub sc_threshold: f64,
    pub mutual: bool,
    pub top_k: usize,
}

impl Default for PlacerecSection {
    fn default() -> Self {
        let m = MatchConfig::default();
        Self { scan_context: ScanContextParams::default(), sc_threshold: m.threshold, mutual: m.mutual, top_k: m.top_k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    pub symmetric: bool,
    pub gamma: f64,
    pub optimize: OptimizeConfig,
    pub odometry_information: [f64; 6],
    pub loop_information: [f64; 6],
}

impl Default for MergeSection {
    fn default() -> Self {
        let m = MergeConfig::default();
        Self {
            symmetric: m.symmetric,
            gamma: DEFAULT_GAMMA,
            optimize: m.optimize,
            odometry_information: m.odometry_information,
            loop_information: m.loop_information,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks that cannot be expressed in the schema. World and route
    /// geometry is checked when the world is built.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("`{key}` {why}")));
        if self.robots.is_empty() {
            return bad("robots", "must list at least one robot");
        }
        let mut ids: Vec<u32> = self.robots.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("robots.id", "must be unique");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must not be empty");
        }
        if !(self.frontend.keyframe_distance > 0.0) {
            return bad("frontend.keyframe_distance", "must be positive");
        }
        if !(self.frontend.keyframe_voxel >= 0.0) {
            return bad("frontend.keyframe_voxel", "must be >= 0");
        }
        if !(self.frontend.tunnel_width_threshold >= 0.0) {
            return bad("frontend.tunnel_width_threshold", "must be >= 0");
        }
        if !(self.merge.gamma > 0.0) {
            return bad("merge.gamma", "must be positive");
        }
        for (key, v) in [("merge.odometry_information", &self.merge.odometry_information), ("merge.loop_information", &self.merge.loop_information)] {
            if v.iter().any(|x| !(*x > 0.0)) {
                return bad(key, "entries must be positive");
            }
        }
        self.frontend.odometry.validate().map_err(|e| CliError::Config(format!("frontend.odometry: {e}")))?;
        self.registration.validate().map_err(|e| CliError::Config(format!("registration: {e}")))?;
        self.lidar.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn robot_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.robots.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Merge settings for one regime of the matrix.
    pub fn merge_config(&self, use_filter: bool, use_pcm: bool) -> MergeConfig {
        MergeConfig {
            use_filter,
            use_pcm,
            symmetric: self.merge.symmetric,
            matching: MatchConfig { threshold: self.placerec.sc_threshold, use_filter, mutual: self.placerec.mutual, top_k: self.placerec.top_k },
            registration: self.registration.clone(),
            gamma: self.merge.gamma,
            optimize: self.merge.optimize.clone(),
            odometry_information: self.merge.odometry_information,
            loop_information: self.merge.loop_information,
        }
    }
}
