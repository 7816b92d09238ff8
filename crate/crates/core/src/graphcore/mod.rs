//! Pose-graph data model, residuals and Jacobians, Levenberg-Marquardt and
//! graduated non-convexity optimization, and g2o text IO.

mod g2o;
mod optimize;
mod sparse;

pub use g2o::{format_g2o, format_sidecar, node_id, parse_g2o, parse_sidecar, read_g2o, sidecar_path, write_g2o, G2oError, ParsedGraph, SIDECAR_HEADER};
pub use optimize::{optimize, GncStep, OptimizeConfig, OptimizeResult, RobustKernel, DEFAULT_BARC2};

use crate::geom::{se3_left_jacobian_inv, se3_right_jacobian_inv, Mat6, Pose3, Vec6};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {0} is missing")]
    MissingNode(NodeKey),
    #[error("duplicate node {0}")]
    DuplicateNode(NodeKey),
    #[error("edge {0} -> {1}: information matrix is not symmetric positive definite")]
    BadInformation(NodeKey, NodeKey),
    #[error("odometry edge {0} -> {1} must join successive keyframes of one robot")]
    BadOdometryEdge(NodeKey, NodeKey),
    #[error("graph is not connected: {0} cannot be reached from the anchor")]
    Disconnected(NodeKey),
    #[error("normal equations are not positive definite")]
    NotPositiveDefinite,
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

/// Graph node identifier: a robot and its keyframe counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey {
    pub robot: u32,
    pub index: u32,
}

impl NodeKey {
    pub fn new(robot: u32, index: u32) -> Self {
        Self { robot, index }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.robot, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    InterRobot,
}

/// Evaluation label of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCategory {
    Correct,
    WrongPr,
    WrongPcr,
    Unknown,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Odometry => "odometry",
            EdgeKind::InterRobot => "inter_robot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "odometry" => Some(EdgeKind::Odometry),
            "inter_robot" => Some(EdgeKind::InterRobot),
            _ => None,
        }
    }
}

impl EdgeCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeCategory::Correct => "correct",
            EdgeCategory::WrongPr => "wrong_pr",
            EdgeCategory::WrongPcr => "wrong_pcr",
            EdgeCategory::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "correct" => Some(EdgeCategory::Correct),
            "wrong_pr" => Some(EdgeCategory::WrongPr),
            "wrong_pcr" => Some(EdgeCategory::WrongPcr),
            "unknown" => Some(EdgeCategory::Unknown),
            _ => None,
        }
    }

    pub fn is_outlier(&self) -> bool {
        matches!(self, EdgeCategory::WrongPr | EdgeCategory::WrongPcr)
    }
}

/// Default odometry information in g2o order (translation block first):
/// 0.1 m and 0.05 rad standard deviations.
pub fn default_odometry_information() -> Mat6 {
    Mat6::from_diagonal(&Vec6::new(100.0, 100.0, 100.0, 400.0, 400.0, 400.0))
}

/// Swaps the translation and rotation blocks of a 6×6 matrix, converting
/// between g2o order and the `(ω, v)` tangent order.
pub fn swap_blocks(m: &Mat6) -> Mat6 {
    let mut out = Mat6::zeros();
    for r in 0..6 {
        for c in 0..6 {
            out[((r + 3) % 6, (c + 3) % 6)] = m[(r, c)];
        }
    }
    out
}

/// A relative-pose constraint from `from` to `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeKey,
    pub to: NodeKey,
    pub measurement: Pose3,
    /// Information matrix in g2o order: translation rows/columns first.
    pub information: Mat6,
    pub kind: EdgeKind,
    pub category: EdgeCategory,
    pub gnc_weight: f64,
}

impl Edge {
    pub fn odometry(from: NodeKey, to: NodeKey, measurement: Pose3, information: Mat6) -> Self {
        Self { from, to, measurement, information, kind: EdgeKind::Odometry, category: EdgeCategory::Correct, gnc_weight: 1.0 }
    }

    pub fn inter_robot(from: NodeKey, to: NodeKey, measurement: Pose3, information: Mat6) -> Self {
        Self { from, to, measurement, information, kind: EdgeKind::InterRobot, category: EdgeCategory::Unknown, gnc_weight: 1.0 }
    }

    /// Information in `(ω, v)` order, matching `Pose3::log`.
    pub fn information_tangent(&self) -> Mat6 {
        swap_blocks(&self.information)
    }

    pub fn covariance_tangent(&self) -> Option<Mat6> {
        let cov = self.information_tangent().cholesky()?.inverse();
        Some((cov + cov.transpose()) * 0.5)
    }
}

pub fn is_valid_information(m: &Mat6) -> bool {
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = m.abs().max().max(1.0);
    if (m - m.transpose()).abs().max() > 1e-9 * scale {
        return false;
    }
    m.cholesky().is_some()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    nodes: BTreeMap<NodeKey, Pose3>,
    edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &BTreeMap<NodeKey, Pose3> {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [Edge] {
        &mut self.edges
    }

    pub fn node(&self, key: &NodeKey) -> Option<&Pose3> {
        self.nodes.get(key)
    }

    pub fn add_node(&mut self, key: NodeKey, pose: Pose3) -> Result<(), GraphError> {
        if self.nodes.contains_key(&key) {
            return Err(GraphError::DuplicateNode(key));
        }
        self.nodes.insert(key, pose);
        Ok(())
    }

    pub fn set_node(&mut self, key: NodeKey, pose: Pose3) -> Result<(), GraphError> {
        match self.nodes.get_mut(&key) {
            Some(p) => {
                *p = pose;
                Ok(())
            }
            None => Err(GraphError::MissingNode(key)),
        }
    }

    /// Adds an edge after checking endpoints and information. Odometry
    /// edges must join a robot's node to its next present node.
    pub fn add_edge(&mut self, edge: Edge) -> Result<(), GraphError> {
        for k in [edge.from, edge.to] {
            if !self.nodes.contains_key(&k) {
                return Err(GraphError::MissingNode(k));
            }
        }
        if !is_valid_information(&edge.information) {
            return Err(GraphError::BadInformation(edge.from, edge.to));
        }
        if edge.kind == EdgeKind::Odometry {
            let next = self.nodes.range(NodeKey::new(edge.from.robot, edge.from.index.saturating_add(1))..).next().map(|(k, _)| *k);
            if edge.from.robot != edge.to.robot || next != Some(edge.to) {
                return Err(GraphError::BadOdometryEdge(edge.from, edge.to));
            }
        }
        self.edges.push(edge);
        Ok(())
    }

    /// Adds an edge without validation; used by parsers that report
    /// problems as diagnostics instead.
    pub(crate) fn push_edge_unchecked(&mut self, edge: Edge) {
        self.edges.push(edge);
    }

    pub fn robots(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.nodes.keys().map(|k| k.robot).collect();
        r.dedup();
        r
    }

    pub fn inter_robot_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::InterRobot)
    }
}

/// `log(Z⁻¹ · Xi⁻¹ · Xj)` in `(ω, v)` order.
pub fn residual(edge: &Edge, poses: &BTreeMap<NodeKey, Pose3>) -> Result<Vec6, GraphError> {
    let xi = poses.get(&edge.from).ok_or(GraphError::MissingNode(edge.from))?;
    let xj = poses.get(&edge.to).ok_or(GraphError::MissingNode(edge.to))?;
    Ok(residual_of(&edge.measurement, xi, xj))
}

pub(crate) fn residual_of(z: &Pose3, xi: &Pose3, xj: &Pose3) -> Vec6 {
    z.inverse().compose(&xi.between(xj)).log()
}

/// Jacobians of the residual with respect to right perturbations
/// `X ← X · exp(δ)` of the `from` and `to` poses.
pub fn residual_jacobians(z: &Pose3, xi: &Pose3, xj: &Pose3) -> (Mat6, Mat6) {
    let r = residual_of(z, xi, xj);
    let jj = se3_right_jacobian_inv(&r);
    let ji = -se3_left_jacobian_inv(&r) * z.inverse().adjoint();
    (ji, jj)
}

/// Weighted squared error `rᵀ Ω r` of one edge.
pub fn edge_chi2(edge: &Edge, poses: &BTreeMap<NodeKey, Pose3>) -> Result<f64, GraphError> {
    let r = residual(edge, poses)?;
    Ok(r.dot(&(edge.information_tangent() * r)))
}
