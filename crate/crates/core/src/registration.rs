//! Initialization-free registration for loop verification: PCA normals,
//! FPFH features, mutual nearest-feature correspondences, maximum-clique
//! outlier rejection on pairwise length consistency, closed-form alignment
//! and ICP refinement.

use crate::frontend::{icp_register, OdometryConfig, OdometryMode};
use crate::geom::{umeyama_align, PointCloud, Pose3, Vec3};
use crate::robustsel::{maximum_cliques, Adjacency, RobustError};
use crate::spatial::HashGrid;
use nalgebra::{Matrix3, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

pub const FPFH_BINS: usize = 11;
pub const FPFH_DIM: usize = 3 * FPFH_BINS;

pub type Histogram = SVector<f64, FPFH_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("{which} cloud has {n} points after downsampling, need at least {min}")]
    TooFewPoints { which: &'static str, n: usize, min: usize },
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Clique(#[from] RobustError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub voxel_size: f64,
    pub normal_radius: f64,
    pub feature_radius: f64,
    /// Feature matching runs on at most this many evenly spaced points.
    pub max_keypoints: usize,
    /// Correspondences kept (best feature distance first) before the clique.
    pub max_correspondences: usize,
    pub distance_consistency_eps: f64,
    pub clique_vertex_limit: usize,
    /// Maximum cliques compared by alignment RMSE when several tie.
    pub tie_candidates: usize,
    pub icp_max_correspondence: f64,
    pub icp_iterations: usize,
    pub min_inliers: usize,
    pub min_fitness: f64,
    pub min_points: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.5,
            normal_radius: 1.0,
            feature_radius: 2.5,
            max_keypoints: 800,
            max_correspondences: 300,
            distance_consistency_eps: 0.3,
            clique_vertex_limit: crate::robustsel::DEFAULT_VERTEX_LIMIT,
            tie_candidates: 8,
            icp_max_correspondence: 1.0,
            icp_iterations: 30,
            min_inliers: 5,
            min_fitness: 0.3,
            min_points: 50,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: &str| Err(RegistrationError::InvalidConfig(m.into()));
        if !(self.voxel_size >= 0.0) {
            return bad("voxel_size must be >= 0");
        }
        if !(self.normal_radius > 0.0 && self.feature_radius > 0.0) {
            return bad("normal_radius and feature_radius must be positive");
        }
        if self.max_keypoints == 0 || self.max_correspondences == 0 || self.tie_candidates == 0 {
            return bad("keypoint, correspondence and tie counts must be positive");
        }
        if self.max_correspondences > self.clique_vertex_limit {
            return bad("max_correspondences exceeds clique_vertex_limit");
        }
        if !(self.distance_consistency_eps > 0.0 && self.icp_max_correspondence > 0.0) {
            return bad("distance_consistency_eps and icp_max_correspondence must be positive");
        }
        if self.icp_iterations == 0 {
            return bad("icp_iterations must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.min_fitness) {
            return bad("min_fitness must lie in [0, 1]");
        }
        if self.min_inliers < 3 {
            return bad("min_inliers must be >= 3");
        }
        Ok(())
    }
}

/// Unit normals from the PCA of each radius neighbourhood (the point itself
/// included), oriented toward `viewpoint`. Fewer than 3 neighbours, or a
/// neighbourhood without a well-defined smallest axis, gives `None`.
pub fn normals_toward(points: &[Vec3], radius: f64, viewpoint: &Vec3) -> Vec<Option<Vec3>> {
    assert!(radius > 0.0, "normal radius must be positive");
    let grid = HashGrid::new(points, radius);
    let mut nb = Vec::new();
    points
        .iter()
        .map(|p| {
            grid.within_into(p, radius, &mut nb);
            if nb.len() < 3 {
                return None;
            }
            let mean = nb.iter().map(|&i| points[i]).sum::<Vec3>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for &i in &nb {
                let d = points[i] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            // collinear neighbourhoods have no unique normal
            if eig.eigenvalues[order[1]] <= 1e-12 * eig.eigenvalues[order[2]].max(1e-300) {
                return None;
            }
            let mut n: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
            if n.dot(&(viewpoint - p)) < 0.0 {
                n = -n;
            }
            Some(n)
        })
        .collect()
}

/// Normals oriented toward the sensor origin.
pub fn normals_for_points(points: &[Vec3], radius: f64) -> Vec<Option<Vec3>> {
    normals_toward(points, radius, &Vec3::zeros())
}

pub fn estimate_normals(cloud: &PointCloud, radius: f64) -> Vec<Option<Vec3>> {
    normals_for_points(cloud.points(), radius)
}

/// Darboux-frame pair features `(alpha-angle, phi, theta)` as in the
/// reference FPFH implementation. `None` for coincident points.
fn pair_features(p1: &Vec3, n1: &Vec3, p2: &Vec3, n2: &Vec3) -> Option<[f64; 3]> {
    let mut dp = p2 - p1;
    let dist = dp.norm();
    if dist == 0.0 {
        return None;
    }
    let a1 = n1.dot(&dp) / dist;
    let a2 = n2.dot(&dp) / dist;
    let (u, n_other, f3) = if a1.abs().clamp(-1.0, 1.0).acos() > a2.abs().clamp(-1.0, 1.0).acos() {
        dp = -dp;
        (n2, n1, -a2)
    } else {
        (n1, n2, a1)
    };
    let v = dp.cross(u);
    let vn = v.norm();
    if vn == 0.0 {
        return Some([0.0, 0.0, 0.0]);
    }
    let v = v / vn;
    let w = u.cross(&v);
    let f2 = v.dot(n_other);
    let f1 = w.dot(n_other).atan2(u.dot(n_other));
    Some([f1, f2, f3])
}

fn bin(x: f64, lo: f64, hi: f64) -> usize {
    let b = (FPFH_BINS as f64 * (x - lo) / (hi - lo)).floor();
    b.clamp(0.0, (FPFH_BINS - 1) as f64) as usize
}

fn normalize_blocks(h: &mut Histogram) {
    for k in 0..3 {
        let mut block = h.fixed_rows_mut::<FPFH_BINS>(k * FPFH_BINS);
        let s = block.sum();
        if s > 0.0 {
            block /= s;
        }
    }
}

/// FPFH signatures, 3 features × 11 bins, L1-normalized to 1. Points
/// without a normal or without valid neighbours get a zero histogram.
pub fn fpfh(points: &[Vec3], normals: &[Option<Vec3>], radius: f64) -> Vec<Histogram> {
    assert_eq!(points.len(), normals.len(), "one normal slot per point");
    assert!(radius > 0.0, "feature radius must be positive");
    let grid = HashGrid::new(points, radius);
    let neighbours: Vec<Vec<usize>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if normals[i].is_none() {
                return Vec::new();
            }
            grid.within(p, radius).into_iter().filter(|&j| j != i && normals[j].is_some() && points[j] != *p).collect()
        })
        .collect();
    let spfh: Vec<Histogram> = (0..points.len())
        .map(|i| {
            let mut h = Histogram::zeros();
            let Some(ni) = normals[i] else { return h };
            for &j in &neighbours[i] {
                if let Some([f1, f2, f3]) = pair_features(&points[i], &ni, &points[j], &normals[j].unwrap()) {
                    h[bin(f1, -std::f64::consts::PI, std::f64::consts::PI)] += 1.0;
                    h[FPFH_BINS + bin(f2, -1.0, 1.0)] += 1.0;
                    h[2 * FPFH_BINS + bin(f3, -1.0, 1.0)] += 1.0;
                }
            }
            normalize_blocks(&mut h);
            h
        })
        .collect();
    (0..points.len())
        .map(|i| {
            if neighbours[i].is_empty() {
                return Histogram::zeros();
            }
            let mut acc = Histogram::zeros();
            for &j in &neighbours[i] {
                acc += spfh[j] / (points[j] - points[i]).norm_squared();
            }
            normalize_blocks(&mut acc);
            let mut h = spfh[i] + acc;
            let s = h.sum();
            if s > 0.0 {
                h /= s;
            }
            h
        })
        .collect()
}

/// A downsampled cloud with normals and features, reusable across
/// candidate pairs.
#[derive(Debug, Clone)]
pub struct FeatureCloud {
    pub points: Vec<Vec3>,
    pub features: Vec<Histogram>,
    /// Indices of the points taking part in feature matching.
    pub keypoints: Vec<usize>,
}

impl FeatureCloud {
    pub fn prepare(cloud: &PointCloud, cfg: &RegistrationConfig) -> Result<Self, RegistrationError> {
        cfg.validate()?;
        let points = cloud.voxel_downsample(cfg.voxel_size).points().to_vec();
        let normals = normals_for_points(&points, cfg.normal_radius);
        let features = fpfh(&points, &normals, cfg.feature_radius);
        let valid: Vec<usize> = (0..points.len()).filter(|&i| features[i].sum() > 0.0).collect();
        let keypoints = if valid.len() <= cfg.max_keypoints {
            valid
        } else {
            (0..cfg.max_keypoints).map(|k| valid[k * valid.len() / cfg.max_keypoints]).collect()
        };
        Ok(Self { points, features, keypoints })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps source coordinates into the target frame.
    pub pose: Pose3,
    pub inlier_correspondences: usize,
    pub fitness: f64,
    pub rmse: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub feature_distance: f64,
}

/// Full output of one registration, for debugging.
#[derive(Debug, Clone)]
pub struct RegistrationTrace {
    pub result: RegistrationResult,
    pub correspondences: Vec<Correspondence>,
    /// Indices into `correspondences`.
    pub clique: Vec<usize>,
}

fn nearest_feature(f: &Histogram, pool: &FeatureCloud) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for &k in &pool.keypoints {
        let d = (pool.features[k] - f).norm_squared();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Mutual nearest neighbours in feature space, best first, capped.
pub fn mutual_correspondences(src: &FeatureCloud, tgt: &FeatureCloud, cap: usize) -> Vec<Correspondence> {
    let back: std::collections::HashMap<usize, usize> =
        tgt.keypoints.iter().map(|&t| (t, nearest_feature(&tgt.features[t], src).0)).collect();
    let mut out: Vec<Correspondence> = src
        .keypoints
        .iter()
        .filter_map(|&s| {
            let (t, d) = nearest_feature(&src.features[s], tgt);
            (t != usize::MAX && back.get(&t) == Some(&s)).then(|| Correspondence { source: s, target: t, feature_distance: d.sqrt() })
        })
        .collect();
    out.sort_by(|a, b| a.feature_distance.total_cmp(&b.feature_distance).then(a.source.cmp(&b.source)));
    out.truncate(cap);
    out
}

/// Edge between two correspondences iff the source and target segment
/// lengths agree within `eps`.
pub fn length_consistency(src: &[Vec3], tgt: &[Vec3], corr: &[Correspondence], eps: f64) -> Adjacency {
    let mut adj = Adjacency::new(corr.len());
    for i in 0..corr.len() {
        for j in i + 1..corr.len() {
            let ls = (src[corr[i].source] - src[corr[j].source]).norm();
            let lt = (tgt[corr[i].target] - tgt[corr[j].target]).norm();
            if (ls - lt).abs() <= eps {
                adj.connect(i, j);
            }
        }
    }
    adj
}

fn align_rmse(a: &[Vec3], b: &[Vec3], pose: &Pose3) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (pose.transform_point(p) - q).norm_squared()).sum();
    (s / a.len() as f64).sqrt()
}

pub fn register_prepared(src: &FeatureCloud, tgt: &FeatureCloud, cfg: &RegistrationConfig) -> Result<RegistrationTrace, RegistrationError> {
    cfg.validate()?;
    for (which, c) in [("source", src), ("target", tgt)] {
        if c.len() < cfg.min_points {
            return Err(RegistrationError::TooFewPoints { which, n: c.len(), min: cfg.min_points });
        }
    }
    let corr = mutual_correspondences(src, tgt, cfg.max_correspondences);
    let adj = length_consistency(&src.points, &tgt.points, &corr, cfg.distance_consistency_eps);
    let cliques = maximum_cliques(&adj, cfg.clique_vertex_limit, cfg.tie_candidates)?;
    let mut best: Option<(f64, Pose3, Vec<usize>)> = None;
    for clique in cliques {
        if clique.len() < 3 {
            continue;
        }
        let a: Vec<Vec3> = clique.iter().map(|&k| src.points[corr[k].source]).collect();
        let b: Vec<Vec3> = clique.iter().map(|&k| tgt.points[corr[k].target]).collect();
        let Ok(pose) = umeyama_align(&a, &b) else { continue };
        let rmse = align_rmse(&a, &b, &pose);
        if best.as_ref().is_none_or(|(r, _, _)| rmse < *r) {
            best = Some((rmse, pose, clique));
        }
    }
    let Some((_, coarse, clique)) = best else {
        let result = RegistrationResult { pose: Pose3::identity(), inlier_correspondences: 0, fitness: 0.0, rmse: 0.0, converged: false };
        return Ok(RegistrationTrace { result, correspondences: corr, clique: Vec::new() });
    };
    let icp_cfg = OdometryConfig {
        mode: OdometryMode::Unconstrained,
        max_correspondence_dist: cfg.icp_max_correspondence,
        voxel_size: 0.0,
        max_iterations: cfg.icp_iterations,
        ..OdometryConfig::default()
    };
    let s = PointCloud::new(src.points.clone()).expect("finite points");
    let t = PointCloud::new(tgt.points.clone()).expect("finite points");
    let result = match icp_register(&s, &t, &coarse, &icp_cfg) {
        Ok(icp) => RegistrationResult {
            pose: icp.pose,
            inlier_correspondences: clique.len(),
            fitness: icp.fitness,
            rmse: icp.rmse,
            converged: clique.len() >= cfg.min_inliers && icp.fitness >= cfg.min_fitness,
        },
        // the coarse pose overlaps nothing within the ICP radius
        Err(_) => RegistrationResult { pose: coarse, inlier_correspondences: clique.len(), fitness: 0.0, rmse: 0.0, converged: false },
    };
    Ok(RegistrationTrace { result, correspondences: corr, clique })
}

/// Registers `source` onto `target` without an initial guess.
pub fn global_register(source: &PointCloud, target: &PointCloud, cfg: &RegistrationConfig) -> Result<RegistrationResult, RegistrationError> {
    let src = FeatureCloud::prepare(source, cfg)?;
    let tgt = FeatureCloud::prepare(target, cfg)?;
    Ok(register_prepared(&src, &tgt, cfg)?.result)
}

/// Debug dump of a trace's correspondences.
pub fn write_correspondences_csv<W: Write>(trace: &RegistrationTrace, src: &FeatureCloud, tgt: &FeatureCloud, mut w: W) -> std::io::Result<()> {
    writeln!(w, "source,target,sx,sy,sz,tx,ty,tz,feature_distance,inlier")?;
    for (k, c) in trace.correspondences.iter().enumerate() {
        let (p, q) = (src.points[c.source], tgt.points[c.target]);
        let inlier = trace.clique.contains(&k);
        writeln!(w, "{},{},{},{},{},{},{},{},{},{}", c.source, c.target, p.x, p.y, p.z, q.x, q.y, q.z, c.feature_distance, inlier)?;
    }
    Ok(())
}
