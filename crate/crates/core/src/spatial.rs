//! Uniform spatial hash grid for nearest-neighbour and radius queries.

use crate::geom::{voxel_key, Vec3};
use std::collections::HashMap;

pub struct HashGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> HashGrid<'a> {
    /// Indexes `points` with cubic cells of side `cell`.
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(voxel_key(p, cell)).or_default().push(i as u32);
        }
        Self { points, cell, cells }
    }

    pub fn points(&self) -> &'a [Vec3] {
        self.points
    }

    /// Closest indexed point within `max_dist` of `q`. Ties go to the lower
    /// index so results do not depend on hash iteration order.
    pub fn nearest(&self, q: &Vec3, max_dist: f64) -> Option<(usize, f64)> {
        let reach = (max_dist / self.cell).ceil() as i64;
        let (cx, cy, cz) = voxel_key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        let max2 = max_dist * max_dist;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in ids {
                            let d2 = (self.points[i as usize] - q).norm_squared();
                            if d2 > max2 {
                                continue;
                            }
                            let better = match best {
                                None => true,
                                Some((bi, bd)) => d2 < bd || (d2 == bd && (i as usize) < bi),
                            };
                            if better {
                                best = Some((i as usize, d2));
                            }
                        }
                    }
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    /// Indices of all points within `radius` of `q`, sorted ascending.
    pub fn within(&self, q: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_into(q, radius, &mut out);
        out
    }

    pub fn within_into(&self, q: &Vec3, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = voxel_key(q, self.cell);
        let r2 = radius * radius;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(
                            ids.iter()
                                .map(|&i| i as usize)
                                .filter(|&i| (self.points[i] - q).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-2.0..2.0)))
            .collect();
        let grid = HashGrid::new(&pts, 0.7);
        for _ in 0..200 {
            let q = Vec3::new(rng.random_range(-11.0..11.0), rng.random_range(-11.0..11.0), rng.random_range(-3.0..3.0));
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm()))
                .filter(|(_, d)| *d <= 1.5)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            assert_eq!(grid.nearest(&q, 1.5).map(|x| x.0), brute.map(|x| x.0));
            let mut want: Vec<usize> = pts.iter().enumerate().filter(|(_, p)| (*p - q).norm() <= 2.0).map(|(i, _)| i).collect();
            want.sort();
            assert_eq!(grid.within(&q, 2.0), want);
        }
    }
}
