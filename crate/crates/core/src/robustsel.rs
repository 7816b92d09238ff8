//! Pairwise consistency maximization over inter-robot loops and the exact
//! maximum-clique solver it shares with global registration.

use crate::geom::{Mat6, Pose3};
use crate::graphcore::{Edge, EdgeKind, PoseGraph};
use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

/// 0.99 quantile of the chi-square distribution with 6 degrees of freedom.
pub const DEFAULT_GAMMA: f64 = 16.811893829770927;

/// Largest graph `max_clique` accepts by default.
pub const DEFAULT_VERTEX_LIMIT: usize = 500;

#[derive(Debug, Error, PartialEq)]
pub enum RobustError {
    #[error("graph has {n} vertices, above the limit of {limit}")]
    SizeLimit { n: usize, limit: usize },
    #[error("robot {robot} has no odometry path reaching keyframe {index}")]
    MissingOdometrySpan { robot: u32, index: u32 },
    #[error("loop ({0}) does not connect robot {1} to robot {2}")]
    WrongRobotPair(String, u32, u32),
    #[error("composed covariance is not positive definite")]
    NotPositiveDefinite,
}

/// Dense symmetric boolean adjacency stored as bit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl Adjacency {
    pub fn new(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        Self { n, words, bits: vec![0; n * words] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Adds the undirected edge `i – j`. Self loops are ignored.
    pub fn connect(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        self.bits[i * self.words + j / 64] |= 1 << (j % 64);
        self.bits[j * self.words + i / 64] |= 1 << (i % 64);
    }

    pub fn has(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    pub fn degree(&self, i: usize) -> usize {
        self.bits[i * self.words..(i + 1) * self.words].iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_clique(&self, vs: &[usize]) -> bool {
        vs.iter().enumerate().all(|(a, &i)| vs[a + 1..].iter().all(|&j| self.has(i, j)))
    }
}

impl Adjacency {
    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    fn full_set(&self) -> Vec<u64> {
        let mut s = vec![0u64; self.words];
        for v in 0..self.n {
            s[v / 64] |= 1 << (v % 64);
        }
        s
    }

    /// Relabels vertex `perm[k]` as `k`.
    fn permuted(&self, perm: &[usize]) -> Adjacency {
        let mut out = Adjacency::new(self.n);
        for (a, &i) in perm.iter().enumerate() {
            for (b, &j) in perm.iter().enumerate().skip(a + 1) {
                if self.has(i, j) {
                    out.connect(a, b);
                }
            }
        }
        out
    }
}

fn first_set(s: &[u64]) -> Option<usize> {
    s.iter().enumerate().find(|(_, w)| **w != 0).map(|(k, w)| 64 * k + w.trailing_zeros() as usize)
}

fn clear_bit(s: &mut [u64], v: usize) {
    s[v / 64] &= !(1 << (v % 64));
}

fn count(s: &[u64]) -> usize {
    s.iter().map(|w| w.count_ones() as usize).sum()
}

fn intersect(a: &[u64], b: &[u64]) -> Vec<u64> {
    a.iter().zip(b).map(|(x, y)| x & y).collect()
}

/// Greedy colouring of `p` by independent sets taken in index order.
/// Returns `(vertex, colour)` for vertices whose colour is at least `kmin`,
/// grouped by colour; cheaper colours can never beat the incumbent.
fn colour_classes(adj: &Adjacency, p: &[u64], kmin: usize) -> Vec<(usize, usize)> {
    let mut u = p.to_vec();
    let mut out = Vec::new();
    let mut k = 0;
    while u.iter().any(|&w| w != 0) {
        k += 1;
        let mut q = u.clone();
        while let Some(v) = first_set(&q) {
            clear_bit(&mut u, v);
            for (qw, rw) in q.iter_mut().zip(adj.row(v)) {
                *qw &= !rw;
            }
            clear_bit(&mut q, v);
            if k >= kmin {
                out.push((v, k));
            }
        }
    }
    out
}

fn num_colours(adj: &Adjacency, p: &[u64]) -> usize {
    let mut u = p.to_vec();
    let mut k = 0;
    while u.iter().any(|&w| w != 0) {
        k += 1;
        let mut q = u.clone();
        while let Some(v) = first_set(&q) {
            clear_bit(&mut u, v);
            for (qw, rw) in q.iter_mut().zip(adj.row(v)) {
                *qw &= !rw;
            }
            clear_bit(&mut q, v);
        }
    }
    k
}

fn expand(adj: &Adjacency, size: usize, p: &[u64], best: &mut usize) {
    let kmin = (*best + 1).saturating_sub(size).max(1);
    let coloured = colour_classes(adj, p, kmin);
    let mut p = p.to_vec();
    for &(v, colour) in coloured.iter().rev() {
        if size + colour <= *best {
            return;
        }
        let next = intersect(&p, adj.row(v));
        if next.iter().all(|&w| w == 0) {
            *best = (*best).max(size + 1);
        } else {
            expand(adj, size + 1, &next, best);
        }
        clear_bit(&mut p, v);
    }
}

/// Size of a maximum clique, by bitset branch and bound with a greedy
/// colouring bound over vertices in non-increasing degree order.
fn clique_number(adj: &Adjacency) -> usize {
    let mut perm: Vec<usize> = (0..adj.len()).collect();
    perm.sort_by_key(|&v| (std::cmp::Reverse(adj.degree(v)), v));
    let sorted = adj.permuted(&perm);
    let mut best = 0;
    expand(&sorted, 0, &sorted.full_set(), &mut best);
    best
}

/// Cliques of size `omega` in lexicographic order of their sorted vertex
/// lists; stops after `max_count`. `p` holds candidates above `r`'s last.
fn lex_cliques(adj: &Adjacency, r: &mut Vec<usize>, p: &[u64], omega: usize, out: &mut Vec<Vec<usize>>, max_count: usize) {
    let mut rest = p.to_vec();
    while let Some(v) = first_set(&rest) {
        if out.len() >= max_count || r.len() + count(&rest) < omega {
            return;
        }
        clear_bit(&mut rest, v);
        if r.len() + 1 == omega {
            let mut c = r.clone();
            c.push(v);
            out.push(c);
            continue;
        }
        let next = intersect(&rest, adj.row(v));
        if r.len() + 1 + count(&next) < omega || r.len() + 1 + num_colours(adj, &next) < omega {
            continue;
        }
        r.push(v);
        lex_cliques(adj, r, &next, omega, out, max_count);
        r.pop();
    }
}

/// Up to `max_count` maximum cliques, lexicographically smallest first.
pub fn maximum_cliques(adj: &Adjacency, limit: usize, max_count: usize) -> Result<Vec<Vec<usize>>, RobustError> {
    if adj.len() > limit {
        return Err(RobustError::SizeLimit { n: adj.len(), limit });
    }
    if adj.is_empty() || max_count == 0 {
        return Ok(vec![Vec::new()]);
    }
    let omega = clique_number(adj);
    // a vertex of a maximum clique has at least omega - 1 neighbours
    let mut start = adj.full_set();
    for v in 0..adj.len() {
        if adj.degree(v) + 1 < omega {
            clear_bit(&mut start, v);
        }
    }
    let mut out = Vec::new();
    lex_cliques(adj, &mut Vec::new(), &start, omega, &mut out, max_count);
    Ok(out)
}

/// Exact maximum clique by branch and bound with a colouring bound. Among
/// several maximum cliques the lexicographically smallest sorted vertex list
/// is returned.
pub fn max_clique(adj: &Adjacency, limit: usize) -> Result<Vec<usize>, RobustError> {
    Ok(maximum_cliques(adj, limit, 1)?.swap_remove(0))
}

/// Relative odometry of one robot with covariances accumulated along the
/// chain.
#[derive(Debug, Clone)]
pub struct OdometryChain {
    pub robot: u32,
    slot: BTreeMap<u32, usize>,
    prefix_pose: Vec<Pose3>,
    prefix_cov: Vec<Mat6>,
}

impl OdometryChain {
    /// Builds the chain from the odometry edges of `robot` in `graph`.
    /// Nodes without an incoming odometry edge start a new piece that no
    /// span can cross.
    pub fn from_graph(graph: &PoseGraph, robot: u32) -> Result<Self, RobustError> {
        let mut next: BTreeMap<u32, &Edge> = BTreeMap::new();
        for e in graph.edges() {
            if e.kind == EdgeKind::Odometry && e.from.robot == robot && e.to.robot == robot {
                next.insert(e.from.index, e);
            }
        }
        let indices: Vec<u32> = graph.nodes().keys().filter(|k| k.robot == robot).map(|k| k.index).collect();
        let mut chain = Self { robot, slot: BTreeMap::new(), prefix_pose: Vec::new(), prefix_cov: Vec::new() };
        let mut pose = Pose3::identity();
        let mut cov = Mat6::zeros();
        for (n, &idx) in indices.iter().enumerate() {
            if n > 0 {
                let prev = indices[n - 1];
                match next.get(&prev) {
                    Some(e) if e.to.index == idx => {
                        pose = pose.compose(&e.measurement);
                        cov += e.covariance_tangent().ok_or(RobustError::NotPositiveDefinite)?;
                    }
                    // break in the chain: poison spans across it
                    _ => cov += Mat6::from_diagonal_element(f64::INFINITY),
                }
            }
            chain.slot.insert(idx, chain.prefix_pose.len());
            chain.prefix_pose.push(pose);
            chain.prefix_cov.push(cov);
        }
        Ok(chain)
    }

    /// Relative pose `i → j` and its covariance (tangent order).
    pub fn span(&self, i: u32, j: u32) -> Result<(Pose3, Mat6), RobustError> {
        let missing = |index| RobustError::MissingOdometrySpan { robot: self.robot, index };
        let a = *self.slot.get(&i).ok_or(missing(i))?;
        let b = *self.slot.get(&j).ok_or(missing(j))?;
        let (lo, hi) = (a.min(b), a.max(b));
        let cov = self.prefix_cov[hi] - self.prefix_cov[lo];
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(missing(self.robot_index(hi)));
        }
        Ok((self.prefix_pose[a].between(&self.prefix_pose[b]), cov))
    }

    fn robot_index(&self, slot: usize) -> u32 {
        self.slot.iter().find(|(_, &s)| s == slot).map(|(&i, _)| i).unwrap_or(0)
    }
}

fn loop_order_key(e: &Edge) -> (u32, u32) {
    (e.from.index, e.to.index)
}

fn consistency_raw(z_ik: &Edge, z_jl: &Edge, odom_a: &OdometryChain, odom_b: &OdometryChain) -> Result<f64, RobustError> {
    let (a_ij, cov_a) = odom_a.span(z_ik.from.index, z_jl.from.index)?;
    let (b_lk, cov_b) = odom_b.span(z_jl.to.index, z_ik.to.index)?;
    let cycle = z_ik.measurement.inverse().compose(&a_ij).compose(&z_jl.measurement).compose(&b_lk);
    let e = cycle.log();
    let cov = z_ik.covariance_tangent().ok_or(RobustError::NotPositiveDefinite)?
        + z_jl.covariance_tangent().ok_or(RobustError::NotPositiveDefinite)?
        + cov_a
        + cov_b;
    let chol = cov.cholesky().ok_or(RobustError::NotPositiveDefinite)?;
    Ok(e.dot(&chol.solve(&e)))
}

/// Squared Mahalanobis norm of the loop cycle formed by two inter-robot
/// measurements and the odometry between their endpoints.
///
/// Both loops must run from robot A (`odom_a`) to robot B (`odom_b`). The
/// pair is evaluated in a canonical order so the value does not depend on
/// argument order.
pub fn pairwise_consistency(z_ik: &Edge, z_jl: &Edge, odom_a: &OdometryChain, odom_b: &OdometryChain) -> Result<f64, RobustError> {
    for z in [z_ik, z_jl] {
        if z.from.robot != odom_a.robot || z.to.robot != odom_b.robot {
            return Err(RobustError::WrongRobotPair(format!("{} -> {}", z.from, z.to), odom_a.robot, odom_b.robot));
        }
    }
    match loop_order_key(z_ik).cmp(&loop_order_key(z_jl)) {
        std::cmp::Ordering::Less => consistency_raw(z_ik, z_jl, odom_a, odom_b),
        std::cmp::Ordering::Greater => consistency_raw(z_jl, z_ik, odom_a, odom_b),
        std::cmp::Ordering::Equal => {
            let x = consistency_raw(z_ik, z_jl, odom_a, odom_b)?;
            let y = consistency_raw(z_jl, z_ik, odom_a, odom_b)?;
            Ok(x.min(y))
        }
    }
}

/// Consistency graph over loops; vertex `k` is `loops[k]`.
#[derive(Debug, Clone)]
pub struct ConsistencyGraph {
    pub adjacency: Adjacency,
    pub gamma: f64,
}

pub fn consistency_graph(loops: &[Edge], odom_a: &OdometryChain, odom_b: &OdometryChain, gamma: f64) -> Result<ConsistencyGraph, RobustError> {
    let rows: Result<Vec<Vec<usize>>, RobustError> = (0..loops.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            for j in (i + 1)..loops.len() {
                if pairwise_consistency(&loops[i], &loops[j], odom_a, odom_b)? <= gamma {
                    row.push(j);
                }
            }
            Ok(row)
        })
        .collect();
    let mut adjacency = Adjacency::new(loops.len());
    for (i, row) in rows?.into_iter().enumerate() {
        for j in row {
            adjacency.connect(i, j);
        }
    }
    Ok(ConsistencyGraph { adjacency, gamma })
}

/// Keeps the loops of the maximum pairwise-consistent subset, in input order.
pub fn pcm_filter(loops: &[Edge], odom_a: &OdometryChain, odom_b: &OdometryChain, gamma: f64) -> Result<Vec<Edge>, RobustError> {
    if loops.is_empty() {
        return Ok(Vec::new());
    }
    let g = consistency_graph(loops, odom_a, odom_b, gamma)?;
    let keep = max_clique(&g.adjacency, DEFAULT_VERTEX_LIMIT)?;
    Ok(keep.into_iter().map(|k| loops[k].clone()).collect())
}
