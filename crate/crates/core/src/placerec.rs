//! Scan Context descriptors and cross-robot candidate search.
//!
//! A descriptor is a rings × sectors polar grid holding the maximum point
//! height per bin. Comparison minimizes the mean column cosine distance over
//! all circular column shifts, which makes it invariant to sensor yaw up to
//! one sector of discretization.

use crate::frontend::KeyFrame;
use crate::geom::PointCloud;
use crate::graphcore::NodeKey;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlaceError {
    #[error("cannot describe an empty cloud")]
    EmptyCloud,
    #[error("descriptor shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("keyframe ({robot}, {index}) has no descriptor")]
    MissingDescriptor { robot: u32, index: u32 },
    #[error("invalid descriptor parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanContextParams {
    pub rings: usize,
    pub sectors: usize,
    pub max_range: f64,
    /// Added to every z before binning so that bin heights are positive.
    pub sensor_height: f64,
}

impl Default for ScanContextParams {
    fn default() -> Self {
        Self { rings: 20, sectors: 60, max_range: 80.0, sensor_height: 2.0 }
    }
}

impl ScanContextParams {
    fn validate(&self) -> Result<(), PlaceError> {
        if self.rings == 0 || self.sectors == 0 {
            return Err(PlaceError::InvalidParams("rings and sectors must be >= 1".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(PlaceError::InvalidParams("max_range must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanContext {
    pub rings: usize,
    pub sectors: usize,
    pub max_range: f64,
    /// Row-major `rings × sectors`; zero marks an empty bin.
    pub matrix: Vec<f64>,
    pub ring_key: Vec<f64>,
}

impl ScanContext {
    pub fn at(&self, ring: usize, sector: usize) -> f64 {
        self.matrix[ring * self.sectors + sector]
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.iter().all(|&v| v == 0.0)
    }

    /// Columns as unit vectors, `None` for empty columns.
    fn unit_columns(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.sectors)
            .map(|j| {
                let col: Vec<f64> = (0..self.rings).map(|i| self.at(i, j)).collect();
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                (norm > 0.0).then(|| col.into_iter().map(|v| v / norm).collect())
            })
            .collect()
    }
}

/// Builds the descriptor of `cloud`. A cloud whose points all lie beyond
/// `max_range` yields an all-zero descriptor.
pub fn scan_context(cloud: &PointCloud, params: &ScanContextParams) -> Result<ScanContext, PlaceError> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(PlaceError::EmptyCloud);
    }
    let (rings, sectors) = (params.rings, params.sectors);
    let ring_width = params.max_range / rings as f64;
    let sector_width = TAU / sectors as f64;
    let mut matrix = vec![0.0f64; rings * sectors];
    for p in cloud.points() {
        let r = (p.x * p.x + p.y * p.y).sqrt();
        if r >= params.max_range {
            continue;
        }
        let ring = ((r / ring_width) as usize).min(rings - 1);
        let az = p.y.atan2(p.x).rem_euclid(TAU);
        let sector = ((az / sector_width) as usize).min(sectors - 1);
        let h = (p.z + params.sensor_height).max(0.0);
        let bin = &mut matrix[ring * sectors + sector];
        *bin = bin.max(h);
    }
    let ring_key = (0..rings)
        .map(|i| matrix[i * sectors..(i + 1) * sectors].iter().filter(|&&v| v > 0.0).count() as f64 / sectors as f64)
        .collect();
    Ok(ScanContext { rings, sectors, max_range: params.max_range, matrix, ring_key })
}

/// Result of comparing two descriptors. Column `j` of the first descriptor
/// is paired with column `(j + shift) % sectors` of the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScDistance {
    pub distance: f64,
    pub shift: usize,
}

pub fn sc_distance(a: &ScanContext, b: &ScanContext) -> Result<ScDistance, PlaceError> {
    if a.rings != b.rings || a.sectors != b.sectors {
        return Err(PlaceError::ShapeMismatch(a.rings, a.sectors, b.rings, b.sectors));
    }
    Ok(distance_columns(&a.unit_columns(), &b.unit_columns()))
}

fn distance_columns(ca: &[Option<Vec<f64>>], cb: &[Option<Vec<f64>>]) -> ScDistance {
    let s = ca.len();
    let mut best = ScDistance { distance: 1.0, shift: 0 };
    let mut found = false;
    for shift in 0..s {
        let mut sum = 0.0;
        let mut used = 0usize;
        for (j, col_a) in ca.iter().enumerate() {
            match (col_a, &cb[(j + shift) % s]) {
                (None, None) => continue,
                (Some(x), Some(y)) if x == y => {}
                (Some(x), Some(y)) => sum += 1.0 - x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>(),
                _ => sum += 1.0,
            }
            used += 1;
        }
        if used == 0 {
            continue;
        }
        let d = (sum / used as f64).clamp(0.0, 1.0);
        if !found || d < best.distance {
            best = ScDistance { distance: d, shift };
            found = true;
        }
    }
    best
}

/// A cross-robot match proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub kf_a: NodeKey,
    pub kf_b: NodeKey,
    pub similarity: f64,
    pub sector_shift: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Minimum similarity (1 − distance) for a candidate.
    pub threshold: f64,
    pub use_filter: bool,
    /// Keep a pair only if each side is the other's best match.
    pub mutual: bool,
    /// Ring-key prefilter size; 0 compares against every keyframe.
    pub top_k: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { threshold: 0.7, use_filter: false, mutual: false, top_k: 10 }
    }
}

struct Prepared<'a> {
    key: NodeKey,
    desc: &'a ScanContext,
    columns: Vec<Option<Vec<f64>>>,
}

fn prepare<'a>(kfs: &'a [KeyFrame], use_filter: bool) -> Result<Vec<Prepared<'a>>, PlaceError> {
    kfs.iter()
        .filter(|kf| !use_filter || kf.informative)
        .map(|kf| {
            let desc = kf
                .descriptor
                .as_ref()
                .ok_or(PlaceError::MissingDescriptor { robot: kf.robot, index: kf.index })?;
            Ok(Prepared { key: kf.key(), desc, columns: desc.unit_columns() })
        })
        .collect()
}

fn ring_key_dist(a: &ScanContext, b: &ScanContext) -> f64 {
    a.ring_key.iter().zip(&b.ring_key).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best match of `q` among `pool`. Ties go to the earlier pool entry.
fn best_in(q: &Prepared, pool: &[Prepared], idx: impl Iterator<Item = usize>) -> Option<(usize, ScDistance)> {
    let mut best: Option<(usize, ScDistance)> = None;
    for i in idx {
        let d = distance_columns(&q.columns, &pool[i].columns);
        let better = match best {
            None => true,
            Some((bi, bd)) => d.distance < bd.distance || (d.distance == bd.distance && i < bi),
        };
        if better {
            best = Some((i, d));
        }
    }
    best
}

fn search(q: &Prepared, pool: &[Prepared], threshold: f64, top_k: usize) -> Option<(usize, ScDistance)> {
    if pool.is_empty() {
        return None;
    }
    if top_k == 0 || top_k >= pool.len() {
        return best_in(q, pool, 0..pool.len());
    }
    let mut order: Vec<(f64, usize)> = pool.iter().enumerate().map(|(i, p)| (ring_key_dist(q.desc, p.desc), i)).collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let shortlist: Vec<usize> = {
        let mut v: Vec<usize> = order[..top_k].iter().map(|x| x.1).collect();
        v.sort_unstable();
        v
    };
    let found = best_in(q, pool, shortlist.into_iter());
    match found {
        Some((_, d)) if 1.0 - d.distance >= threshold => found,
        _ => best_in(q, pool, 0..pool.len()),
    }
}

/// For every keyframe of A, the most similar keyframe of B whose similarity
/// clears the threshold. With `use_filter`, non-informative keyframes on
/// either side are ignored.
pub fn match_keyframes(kfs_a: &[KeyFrame], kfs_b: &[KeyFrame], cfg: &MatchConfig) -> Result<Vec<LoopCandidate>, PlaceError> {
    let pa = prepare(kfs_a, cfg.use_filter)?;
    let pb = prepare(kfs_b, cfg.use_filter)?;
    if let (Some(x), Some(y)) = (pa.first(), pb.first()) {
        if x.desc.rings != y.desc.rings || x.desc.sectors != y.desc.sectors {
            return Err(PlaceError::ShapeMismatch(x.desc.rings, x.desc.sectors, y.desc.rings, y.desc.sectors));
        }
    }
    let forward: Vec<Option<(usize, ScDistance)>> =
        pa.par_iter().map(|q| search(q, &pb, cfg.threshold, cfg.top_k)).collect();
    let mut out = Vec::new();
    for (ia, hit) in forward.into_iter().enumerate() {
        let Some((ib, d)) = hit else { continue };
        let similarity = 1.0 - d.distance;
        if similarity < cfg.threshold {
            continue;
        }
        if cfg.mutual {
            match search(&pb[ib], &pa, cfg.threshold, cfg.top_k) {
                Some((back, _)) if back == ia => {}
                _ => continue,
            }
        }
        out.push(LoopCandidate { kf_a: pa[ia].key, kf_b: pb[ib].key, similarity, sector_shift: d.shift });
    }
    Ok(out)
}

/// Computes and stores descriptors for every keyframe.
pub fn attach_descriptors(kfs: &mut [KeyFrame], params: &ScanContextParams) -> Result<(), PlaceError> {
    let descs: Result<Vec<ScanContext>, PlaceError> = kfs.par_iter().map(|kf| scan_context(&kf.cloud, params)).collect();
    for (kf, d) in kfs.iter_mut().zip(descs?) {
        kf.descriptor = Some(d);
    }
    Ok(())
}
