//! Block-sparse Cholesky for the 6×6-block normal equations of a pose graph.
//!
//! Pose graphs are chains joined by a few loops, so eliminating in minimum
//! degree order keeps the factor nearly as sparse as the system.

use crate::geom::{Mat6, Vec6};
use std::collections::{BTreeSet, HashMap};

/// Symmetric block system `H x = b`; only the lower triangle is stored.
#[derive(Debug, Clone)]
pub(crate) struct BlockSystem {
    pub diag: Vec<Mat6>,
    pub lower: HashMap<(usize, usize), Mat6>,
    pub rhs: Vec<Vec6>,
}

impl BlockSystem {
    pub fn new(n: usize) -> Self {
        Self { diag: vec![Mat6::zeros(); n], lower: HashMap::new(), rhs: vec![Vec6::zeros(); n] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    /// Adds `m` to block `(i, j)`, `i != j`, and its transpose to `(j, i)`.
    pub fn add_off(&mut self, i: usize, j: usize, m: &Mat6) {
        if i > j {
            *self.lower.entry((i, j)).or_insert_with(Mat6::zeros) += m;
        } else {
            *self.lower.entry((j, i)).or_insert_with(Mat6::zeros) += m.transpose();
        }
    }

    /// Solves the system. Returns `None` if a pivot block is not positive
    /// definite.
    pub fn solve(&self) -> Option<Vec<Vec6>> {
        let n = self.len();
        let order = min_degree_order(n, self.lower.keys().copied());
        let mut pos = vec![0usize; n];
        for (p, &v) in order.perm.iter().enumerate() {
            pos[v] = p;
        }
        let mut diag: Vec<Mat6> = order.perm.iter().map(|&v| self.diag[v]).collect();
        let mut low: HashMap<(usize, usize), Mat6> = HashMap::with_capacity(self.lower.len() * 2);
        for (&(i, j), m) in &self.lower {
            let (pi, pj) = (pos[i], pos[j]);
            if pi > pj {
                low.insert((pi, pj), *m);
            } else {
                low.insert((pj, pi), m.transpose());
            }
        }
        let mut lkk: Vec<Mat6> = Vec::with_capacity(n);
        for k in 0..n {
            let l = diag[k].cholesky()?.l();
            let below = &order.below[k];
            let mut cols: Vec<(usize, Mat6)> = Vec::with_capacity(below.len());
            for &i in below {
                let a = low.remove(&(i, k)).unwrap_or_else(Mat6::zeros);
                let lt = l.solve_lower_triangular(&a.transpose())?;
                cols.push((i, lt.transpose()));
            }
            for (x, (i, lik)) in cols.iter().enumerate() {
                diag[*i] -= lik * lik.transpose();
                for (j, ljk) in &cols[..x] {
                    // i and j are both after k; store at (max, min)
                    let (r, c, m) = if i > j { (*i, *j, lik * ljk.transpose()) } else { (*j, *i, ljk * lik.transpose()) };
                    *low.entry((r, c)).or_insert_with(Mat6::zeros) -= m;
                }
            }
            for (i, lik) in cols {
                low.insert((i, k), lik);
            }
            lkk.push(l);
        }
        let mut y: Vec<Vec6> = order.perm.iter().map(|&v| self.rhs[v]).collect();
        for k in 0..n {
            y[k] = lkk[k].solve_lower_triangular(&y[k])?;
            let yk = y[k];
            for &i in &order.below[k] {
                y[i] -= low[&(i, k)] * yk;
            }
        }
        for k in (0..n).rev() {
            let mut v = y[k];
            for &i in &order.below[k] {
                v -= low[&(i, k)].transpose() * y[i];
            }
            y[k] = lkk[k].transpose().solve_upper_triangular(&v)?;
        }
        let mut x = vec![Vec6::zeros(); n];
        for (p, &v) in order.perm.iter().enumerate() {
            x[v] = y[p];
        }
        Some(x)
    }
}

struct Ordering {
    /// `perm[p]` is the original block eliminated at step `p`.
    perm: Vec<usize>,
    /// For each step, the later steps its column of the factor touches.
    below: Vec<Vec<usize>>,
}

/// Greedy minimum-degree elimination order (ties to the lowest block) and
/// the resulting fill pattern.
fn min_degree_order(n: usize, pattern: impl Iterator<Item = (usize, usize)>) -> Ordering {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, j) in pattern {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut done = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    let mut nbrs_at = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n).filter(|&v| !done[v]).min_by_key(|&v| (adj[v].len(), v)).unwrap();
        done[v] = true;
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for &a in &nbrs {
            adj[a].remove(&v);
            for &b in &nbrs {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
        adj[v].clear();
        perm.push(v);
        nbrs_at.push(nbrs);
    }
    let mut pos = vec![0usize; n];
    for (p, &v) in perm.iter().enumerate() {
        pos[v] = p;
    }
    let below = nbrs_at
        .into_iter()
        .map(|ns| {
            let mut b: Vec<usize> = ns.into_iter().map(|v| pos[v]).collect();
            b.sort_unstable();
            b
        })
        .collect();
    Ordering { perm, below }
}
