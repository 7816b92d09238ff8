use super::sparse::BlockSystem;
use super::{residual_jacobians, residual_of, EdgeKind, GraphError, NodeKey, PoseGraph};
use crate::geom::{Mat6, Pose3, Vec6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

/// 0.997 quantile of the chi-square distribution with 6 degrees of freedom.
pub const DEFAULT_BARC2: f64 = 19.8046523588496;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RobustKernel {
    None,
    /// Truncated least squares reached by graduated non-convexity.
    GncTls {
        #[serde(default = "default_barc2")]
        barc2: f64,
        #[serde(default = "default_mu_update")]
        mu_update: f64,
        #[serde(default = "default_max_outer")]
        max_outer: usize,
    },
}

fn default_barc2() -> f64 {
    DEFAULT_BARC2
}
fn default_mu_update() -> f64 {
    1.4
}
fn default_max_outer() -> usize {
    100
}

impl RobustKernel {
    pub fn gnc() -> Self {
        RobustKernel::GncTls { barc2: DEFAULT_BARC2, mu_update: default_mu_update(), max_outer: default_max_outer() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub robust: RobustKernel,
    pub pin_odometry: bool,
    pub max_inner: usize,
    pub lm_lambda0: f64,
    /// Relative cost decrease below which an LM run stops.
    pub convergence_eps: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self { robust: RobustKernel::gnc(), pin_odometry: true, max_inner: 50, lm_lambda0: 1e-4, convergence_eps: 1e-10 }
    }
}

impl OptimizeConfig {
    fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: &str| Err(GraphError::InvalidConfig(m.into()));
        if let RobustKernel::GncTls { barc2, mu_update, max_outer } = self.robust {
            if !(barc2 > 0.0) {
                return bad("barc2 must be positive");
            }
            if !(mu_update > 1.0) {
                return bad("mu_update must exceed 1");
            }
            if max_outer == 0 {
                return bad("max_outer must be >= 1");
            }
        }
        if self.max_inner == 0 {
            return bad("max_inner must be >= 1");
        }
        if !(self.lm_lambda0 > 0.0) || !(self.convergence_eps >= 0.0) {
            return bad("lm_lambda0 must be positive and convergence_eps non-negative");
        }
        Ok(())
    }
}

/// One outer iteration of graduated non-convexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GncStep {
    pub mu: f64,
    /// `Σ w rᵀΩr` after the inner solve.
    pub weighted_chi2: f64,
    /// Edges with weight above one half.
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub poses: BTreeMap<NodeKey, Pose3>,
    /// Weighted chi-square at the solution.
    pub final_chi2: f64,
    /// One weight per graph edge, in edge order.
    pub edge_weights: Vec<f64>,
    pub gnc_trace: Vec<GncStep>,
    /// Costs after every accepted step of the last Levenberg-Marquardt run.
    pub lm_history: Vec<f64>,
}

impl OptimizeResult {
    /// Copies poses and weights into a clone of `graph`.
    pub fn apply_to(&self, graph: &PoseGraph) -> PoseGraph {
        let mut g = graph.clone();
        for (k, p) in &self.poses {
            g.set_node(*k, *p).expect("same node set");
        }
        for (e, w) in g.edges_mut().iter_mut().zip(&self.edge_weights) {
            e.gnc_weight = *w;
        }
        g
    }
}

struct Problem<'a> {
    graph: &'a PoseGraph,
    /// Variable slot per node; the anchor has none.
    slot: BTreeMap<NodeKey, usize>,
    info: Vec<Mat6>,
}

impl Problem<'_> {
    fn chi2(&self, poses: &BTreeMap<NodeKey, Pose3>) -> Vec<f64> {
        self.graph
            .edges()
            .iter()
            .zip(&self.info)
            .map(|(e, om)| {
                let r = residual_of(&e.measurement, &poses[&e.from], &poses[&e.to]);
                r.dot(&(om * r))
            })
            .collect()
    }

    fn cost(&self, poses: &BTreeMap<NodeKey, Pose3>, w: &[f64]) -> f64 {
        self.chi2(poses).iter().zip(w).map(|(c, w)| c * w).sum()
    }

    fn build(&self, poses: &BTreeMap<NodeKey, Pose3>, w: &[f64]) -> BlockSystem {
        let mut sys = BlockSystem::new(self.slot.len());
        for ((e, om), &we) in self.graph.edges().iter().zip(&self.info).zip(w) {
            if we <= 0.0 {
                continue;
            }
            let (xi, xj) = (&poses[&e.from], &poses[&e.to]);
            let r = residual_of(&e.measurement, xi, xj);
            let (ji, jj) = residual_jacobians(&e.measurement, xi, xj);
            let om = om * we;
            let si = self.slot.get(&e.from).copied();
            let sj = self.slot.get(&e.to).copied();
            if let Some(a) = si {
                sys.diag[a] += ji.transpose() * om * ji;
                sys.rhs[a] -= ji.transpose() * om * r;
            }
            if let Some(b) = sj {
                sys.diag[b] += jj.transpose() * om * jj;
                sys.rhs[b] -= jj.transpose() * om * r;
            }
            if let (Some(a), Some(b)) = (si, sj) {
                if a != b {
                    sys.add_off(a, b, &(ji.transpose() * om * jj));
                }
            }
        }
        sys
    }

    fn retract(&self, poses: &BTreeMap<NodeKey, Pose3>, delta: &[Vec6]) -> BTreeMap<NodeKey, Pose3> {
        poses
            .iter()
            .map(|(k, p)| match self.slot.get(k) {
                Some(&s) => (*k, p.compose(&Pose3::exp(&delta[s]))),
                None => (*k, *p),
            })
            .collect()
    }

    /// Levenberg-Marquardt on the weighted problem. Returns the accepted
    /// cost history (starting with the initial cost).
    fn levenberg_marquardt(&self, poses: &mut BTreeMap<NodeKey, Pose3>, w: &[f64], cfg: &OptimizeConfig) -> Result<Vec<f64>, GraphError> {
        let mut cost = self.cost(poses, w);
        let mut history = vec![cost];
        if self.slot.is_empty() {
            return Ok(history);
        }
        let mut lambda = cfg.lm_lambda0;
        for _ in 0..cfg.max_inner {
            if cost <= 1e-24 {
                break;
            }
            let base = self.build(poses, w);
            let mut accepted = false;
            let mut solved_any = false;
            while lambda < 1e12 {
                let mut sys = base.clone();
                for d in sys.diag.iter_mut() {
                    for k in 0..6 {
                        d[(k, k)] += lambda * d[(k, k)].max(1e-6);
                    }
                }
                let Some(delta) = sys.solve() else {
                    lambda *= 10.0;
                    continue;
                };
                solved_any = true;
                let trial = self.retract(poses, &delta);
                let trial_cost = self.cost(&trial, w);
                if trial_cost < cost {
                    let decrease = cost - trial_cost;
                    *poses = trial;
                    cost = trial_cost;
                    history.push(cost);
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    let step = delta.iter().map(|d| d.amax()).fold(0.0, f64::max);
                    if decrease <= cfg.convergence_eps * cost.max(1e-300) || step < 1e-12 {
                        return Ok(history);
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !solved_any {
                return Err(GraphError::NotPositiveDefinite);
            }
            if !accepted {
                break;
            }
        }
        Ok(history)
    }
}

fn check_connected(graph: &PoseGraph, anchor: NodeKey) -> Result<(), GraphError> {
    let mut adj: BTreeMap<NodeKey, Vec<NodeKey>> = BTreeMap::new();
    for e in graph.edges() {
        adj.entry(e.from).or_default().push(e.to);
        adj.entry(e.to).or_default().push(e.from);
    }
    let mut seen = std::collections::BTreeSet::from([anchor]);
    let mut queue = VecDeque::from([anchor]);
    while let Some(k) = queue.pop_front() {
        for n in adj.get(&k).map(|v| v.as_slice()).unwrap_or(&[]) {
            if seen.insert(*n) {
                queue.push_back(*n);
            }
        }
    }
    match graph.nodes().keys().find(|k| !seen.contains(k)) {
        Some(k) => Err(GraphError::Disconnected(*k)),
        None => Ok(()),
    }
}

fn tls_weight(chi2: f64, mu: f64, barc2: f64) -> f64 {
    let upper = (mu + 1.0) / mu * barc2;
    let lower = mu / (mu + 1.0) * barc2;
    if chi2 >= upper {
        0.0
    } else if chi2 <= lower {
        1.0
    } else {
        ((barc2 * mu * (mu + 1.0) / chi2).sqrt() - mu).clamp(0.0, 1.0)
    }
}

/// Minimizes the weighted squared error of `graph` with the lowest node
/// held fixed.
///
/// With [`RobustKernel::GncTls`] the edge weights follow a truncated
/// least-squares surrogate whose non-convexity grows by `mu_update` per
/// outer step. Pinned odometry edges keep weight 1 throughout.
pub fn optimize(graph: &PoseGraph, cfg: &OptimizeConfig) -> Result<OptimizeResult, GraphError> {
    cfg.validate()?;
    let mut poses = graph.nodes().clone();
    let m = graph.edges().len();
    let Some(&anchor) = poses.keys().next() else {
        return Ok(OptimizeResult { poses, final_chi2: 0.0, edge_weights: vec![], gnc_trace: vec![], lm_history: vec![] });
    };
    check_connected(graph, anchor)?;
    let slot = poses.keys().skip(1).enumerate().map(|(i, k)| (*k, i)).collect();
    let info = graph.edges().iter().map(|e| e.information_tangent()).collect();
    let problem = Problem { graph, slot, info };

    let mut weights = vec![1.0; m];
    let mut history = problem.levenberg_marquardt(&mut poses, &weights, cfg)?;
    let mut trace = Vec::new();

    if let RobustKernel::GncTls { barc2, mu_update, max_outer } = cfg.robust {
        let pinned: Vec<bool> = graph.edges().iter().map(|e| cfg.pin_odometry && e.kind == EdgeKind::Odometry).collect();
        let chi2 = problem.chi2(&poses);
        let r2max = chi2.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(c, _)| *c).fold(0.0, f64::max);
        if r2max > barc2 {
            let mut mu = barc2 / (2.0 * r2max - barc2);
            let mut chi2 = chi2;
            for _ in 0..max_outer {
                let prev = weights.clone();
                for k in 0..m {
                    weights[k] = if pinned[k] { 1.0 } else { tls_weight(chi2[k], mu, barc2) };
                }
                history = problem.levenberg_marquardt(&mut poses, &weights, cfg)?;
                chi2 = problem.chi2(&poses);
                let weighted: f64 = chi2.iter().zip(&weights).map(|(c, w)| c * w).sum();
                trace.push(GncStep { mu, weighted_chi2: weighted, inliers: weights.iter().filter(|&&w| w > 0.5).count() });
                let binary = weights.iter().all(|&w| w < 1e-6 || w > 1.0 - 1e-6);
                let stable = weights.iter().zip(&prev).all(|(a, b)| (a - b).abs() < 1e-6);
                if binary && stable {
                    break;
                }
                mu *= mu_update;
            }
        }
    }
    let final_chi2 = problem.cost(&poses, &weights);
    Ok(OptimizeResult { poses, final_chi2, edge_weights: weights, gnc_trace: trace, lm_history: history })
}
