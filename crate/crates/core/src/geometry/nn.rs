//! Uniform-grid nearest-neighbor index.
//!
//! The index is an acceleration structure only: every query returns exactly
//! what an exhaustive scan would, including ties broken by lowest point index.
//! Shells of cells are visited in growing Chebyshev radius and a cell is
//! skipped only when its conservative lower bound strictly exceeds the current
//! worst kept distance, so equal-distance candidates are never pruned.

use std::collections::HashMap;

use nalgebra::Point3;

/// Squared Euclidean distance; the single distance kernel shared by grid
/// queries and by exhaustive comparison, so results agree bitwise.
#[inline]
pub fn dist2(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

pub struct NearestNeighborGrid<'a> {
    points: &'a [Point3<f64>],
    cells: HashMap<[i64; 3], Vec<u32>>,
    cell_size: f64,
    key_lo: [i64; 3],
    key_hi: [i64; 3],
}

impl<'a> NearestNeighborGrid<'a> {
    pub fn build(points: &'a [Point3<f64>]) -> Self {
        assert!(!points.is_empty(), "grid requires at least one point");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let max_extent = (hi - lo).amax();
        let cell_size = if max_extent > 0.0 {
            max_extent / (points.len() as f64).cbrt().max(1.0)
        } else {
            1.0
        };

        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut key_lo = [i64::MAX; 3];
        let mut key_hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = Self::key_for(p, cell_size);
            for a in 0..3 {
                key_lo[a] = key_lo[a].min(key[a]);
                key_hi[a] = key_hi[a].max(key[a]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        Self {
            points,
            cells,
            cell_size,
            key_lo,
            key_hi,
        }
    }

    fn key_for(p: &Point3<f64>, cell_size: f64) -> [i64; 3] {
        [
            (p.x / cell_size).floor() as i64,
            (p.y / cell_size).floor() as i64,
            (p.z / cell_size).floor() as i64,
        ]
    }

    /// Max Chebyshev cell distance from `key` to the occupied key box.
    fn max_shell(&self, key: [i64; 3]) -> i64 {
        let mut r = 0i64;
        for a in 0..3 {
            r = r
                .max((key[a] - self.key_lo[a]).abs())
                .max((key[a] - self.key_hi[a]).abs());
        }
        r
    }

    fn scan_cell(
        &self,
        key: [i64; 3],
        query: &Point3<f64>,
        exclude: Option<u32>,
        mut visit: impl FnMut(u32, f64),
    ) {
        if let Some(indices) = self.cells.get(&key) {
            for &i in indices {
                if Some(i) == exclude {
                    continue;
                }
                visit(i, dist2(query, &self.points[i as usize]));
            }
        }
    }

    /// Calls `visit` for every point in cells at Chebyshev distance exactly
    /// `r` from `center`, clipped to the occupied key box.
    fn scan_shell(
        &self,
        center: [i64; 3],
        r: i64,
        query: &Point3<f64>,
        exclude: Option<u32>,
        visit: &mut impl FnMut(u32, f64),
    ) {
        if r == 0 {
            self.scan_cell(center, query, exclude, &mut *visit);
            return;
        }
        let lo = [center[0] - r, center[1] - r, center[2] - r];
        let hi = [center[0] + r, center[1] + r, center[2] + r];
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let on_shell = (x - center[0]).abs() == r
                        || (y - center[1]).abs() == r
                        || (z - center[2]).abs() == r;
                    if !on_shell {
                        continue;
                    }
                    let key = [x, y, z];
                    if (0..3).any(|a| key[a] < self.key_lo[a] || key[a] > self.key_hi[a]) {
                        continue;
                    }
                    self.scan_cell(key, query, exclude, &mut *visit);
                }
            }
        }
    }

    /// Lower bound on the squared distance from the query to any point in a
    /// cell at Chebyshev distance `r` from the query's cell.
    fn shell_bound2(&self, r: i64) -> f64 {
        let d = (r - 1).max(0) as f64 * self.cell_size;
        d * d
    }

    /// Index and squared distance of the nearest point; ties broken by lowest
    /// index. Matches an exhaustive scan exactly.
    pub fn nearest(&self, query: &Point3<f64>) -> (usize, f64) {
        self.nearest_excluding(query, None)
    }

    pub fn nearest_excluding(&self, query: &Point3<f64>, exclude: Option<u32>) -> (usize, f64) {
        let center = Self::key_for(query, self.cell_size);
        let max_r = self.max_shell(center);
        let mut best: Option<(f64, u32)> = None;
        for r in 0..=max_r {
            if let Some((bd2, _)) = best {
                if self.shell_bound2(r) > bd2 {
                    break;
                }
            }
            self.scan_shell(center, r, query, exclude, &mut |i, d2| {
                let better = match best {
                    None => true,
                    Some((bd2, bi)) => d2 < bd2 || (d2 == bd2 && i < bi),
                };
                if better {
                    best = Some((d2, i));
                }
            });
        }
        let (d2, i) = best.expect("non-empty grid always yields a neighbor");
        (i as usize, d2)
    }

    /// The `k` nearest points ordered by `(distance², index)`; matches an
    /// exhaustive scan sorted the same way. Returns fewer than `k` entries
    /// only when the cloud (minus the excluded index) is smaller than `k`.
    pub fn k_nearest(
        &self,
        query: &Point3<f64>,
        k: usize,
        exclude: Option<u32>,
    ) -> Vec<(usize, f64)> {
        assert!(k >= 1);
        let center = Self::key_for(query, self.cell_size);
        let max_r = self.max_shell(center);
        // Sorted by (d2, index), capped at k entries.
        let mut kept: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        for r in 0..=max_r {
            if kept.len() == k && self.shell_bound2(r) > kept[k - 1].0 {
                break;
            }
            self.scan_shell(center, r, query, exclude, &mut |i, d2| {
                if kept.len() == k {
                    let worst = kept[k - 1];
                    if d2 > worst.0 || (d2 == worst.0 && i > worst.1) {
                        return;
                    }
                }
                let pos = kept
                    .partition_point(|&(d, j)| d < d2 || (d == d2 && j < i));
                kept.insert(pos, (d2, i));
                kept.truncate(k);
            });
        }
        kept.into_iter().map(|(d2, i)| (i as usize, d2)).collect()
    }

    /// Indices of all points with distance ≤ `radius`, ascending by index.
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<usize> {
        assert!(radius >= 0.0);
        let r2 = radius * radius;
        let center = Self::key_for(query, self.cell_size);
        let max_r = self.max_shell(center);
        let mut hits = Vec::new();
        for r in 0..=max_r {
            if self.shell_bound2(r) > r2 {
                break;
            }
            self.scan_shell(center, r, query, None, &mut |i, d2| {
                if d2 <= r2 {
                    hits.push(i as usize);
                }
            });
        }
        hits.sort_unstable();
        hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exhaustive_nearest(points: &[Point3<f64>], q: &Point3<f64>) -> (usize, f64) {
        let mut best = (0usize, dist2(q, &points[0]));
        for (i, p) in points.iter().enumerate().skip(1) {
            let d2 = dist2(q, p);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn nearest_matches_exhaustive_on_a_lattice() {
        let mut points = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..2 {
                    points.push(Point3::new(x as f64, y as f64 * 0.5, z as f64 * 2.0));
                }
            }
        }
        let grid = NearestNeighborGrid::build(&points);
        for q in [
            Point3::new(0.2, 0.1, 0.0),
            Point3::new(10.0, -3.0, 5.0),
            Point3::new(1.5, 1.0, 1.0),
        ] {
            assert_eq!(grid.nearest(&q), exhaustive_nearest(&points, &q));
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // Two points equidistant from the query; index 0 must win.
        let points = vec![Point3::new(1.0, 0.0, 0.0), Point3::new(-1.0, 0.0, 0.0)];
        let grid = NearestNeighborGrid::build(&points);
        let (i, _) = grid.nearest(&Point3::origin());
        assert_eq!(i, 0);
    }

    #[test]
    fn within_radius_is_inclusive_and_sorted() {
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let grid = NearestNeighborGrid::build(&points);
        let hits = grid.within_radius(&Point3::origin(), 1.0);
        assert_eq!(hits, vec![0, 1]);
    }

    #[test]
    fn k_nearest_excludes_and_orders() {
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.5, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
            Point3::new(0.25, 0.0, 0.0),
        ];
        let grid = NearestNeighborGrid::build(&points);
        let knn = grid.k_nearest(&points[0], 2, Some(0));
        assert_eq!(knn.iter().map(|&(i, _)| i).collect::<Vec<_>>(), vec![3, 1]);
    }
}
