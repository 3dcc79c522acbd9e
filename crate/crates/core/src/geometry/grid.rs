//! Uniform spatial grid for exact k-nearest-neighbour queries.
//!
//! Cell size is the bounding-box diagonal divided by the cube root of the
//! point count. Queries expand Chebyshev rings of cells around the query cell
//! and stop once the k-th best squared distance is strictly smaller than the
//! lower bound on any unvisited cell, so results equal an exhaustive scan,
//! including the lowest-index tie break.

use rayon::prelude::*;

use super::cloud::{dist2, Point3};

/// Reference sets at or below this size are scanned exhaustively.
const BRUTE_FORCE_LIMIT: usize = 64;

pub struct GridIndex<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    cell_start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let n = points.len().max(1);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let diag = dist2(&lo, &hi).sqrt();
        let mut cell = diag / (n as f64).cbrt();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = 1.0;
        }
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1);
        }
        let ncells = dims[0] * dims[1] * dims[2];

        let mut index = Self {
            points,
            origin: lo,
            cell,
            dims,
            cell_start: vec![0; ncells + 1],
            order: vec![0; points.len()],
        };
        let cells: Vec<usize> = points
            .iter()
            .map(|p| index.flat(index.cell_of(p)))
            .collect();
        for &c in &cells {
            index.cell_start[c + 1] += 1;
        }
        for c in 0..ncells {
            index.cell_start[c + 1] += index.cell_start[c];
        }
        let mut fill = index.cell_start.clone();
        for (i, &c) in cells.iter().enumerate() {
            index.order[fill[c]] = i;
            fill[c] += 1;
        }
        index
    }

    fn cell_of(&self, p: &Point3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = if f <= 0.0 {
                0
            } else {
                (f as usize).min(self.dims[a] - 1)
            };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn scan_cell(&self, c: [isize; 3], q: &Point3, best: &mut Best) {
        for a in 0..3 {
            if c[a] < 0 || c[a] as usize >= self.dims[a] {
                return;
            }
        }
        let f = self.flat([c[0] as usize, c[1] as usize, c[2] as usize]);
        for &i in &self.order[self.cell_start[f]..self.cell_start[f + 1]] {
            best.offer(dist2(q, &self.points[i]), i);
        }
    }

    /// The `k` nearest points to `q` as `(squared distance, index)`, ascending.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        if self.points.len() <= BRUTE_FORCE_LIMIT {
            let mut best = Best::new(k);
            for (i, p) in self.points.iter().enumerate() {
                best.offer(dist2(q, p), i);
            }
            return best.items;
        }
        let c = self.cell_of(q);
        let c = [c[0] as isize, c[1] as isize, c[2] as isize];
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        let mut best = Best::new(k);
        for ring in 0..=max_ring {
            self.scan_ring(c, ring, q, &mut best);
            if best.is_full() {
                let bound = ring as f64 * self.cell;
                if best.worst() < bound * bound {
                    break;
                }
            }
        }
        best.items
    }

    fn scan_ring(&self, c: [isize; 3], r: isize, q: &Point3, best: &mut Best) {
        if r == 0 {
            self.scan_cell(c, q, best);
            return;
        }
        for dz in -r..=r {
            for dy in -r..=r {
                if dz.abs() == r || dy.abs() == r {
                    for dx in -r..=r {
                        self.scan_cell([c[0] + dx, c[1] + dy, c[2] + dz], q, best);
                    }
                } else {
                    self.scan_cell([c[0] - r, c[1] + dy, c[2] + dz], q, best);
                    self.scan_cell([c[0] + r, c[1] + dy, c[2] + dz], q, best);
                }
            }
        }
    }
}

/// Bounded sorted candidate list ordered by `(distance, index)`.
struct Best {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn is_full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |x| x.0)
    }

    #[inline]
    fn offer(&mut self, d: f64, i: usize) {
        if self.is_full() {
            let last = self.items[self.k - 1];
            if (d, i) >= last {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(bd, bi)| (bd, bi) < (d, i));
        self.items.insert(pos, (d, i));
        self.items.truncate(self.k);
    }
}

/// k nearest reference indices for every query, ascending by distance.
pub fn knn_indices(queries: &[Point3], reference: &[Point3], k: usize) -> Vec<Vec<usize>> {
    let index = GridIndex::new(reference);
    queries
        .par_iter()
        .map(|q| index.knn(q, k).into_iter().map(|(_, i)| i).collect())
        .collect()
}

/// Nearest reference point for every query as `(squared distance, index)`.
pub fn nearest(queries: &[Point3], reference: &[Point3]) -> Vec<(f64, usize)> {
    let index = GridIndex::new(reference);
    queries.par_iter().map(|q| index.knn(q, 1)[0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        };
        (0..n).map(|_| [next(), next(), next()]).collect()
    }

    #[test]
    fn grid_path_matches_scan_with_far_queries() {
        let reference = lcg_points(300, 1);
        let mut queries = lcg_points(50, 2);
        queries.push([10.0, -7.0, 3.0]);
        for q in &queries {
            let got = GridIndex::new(&reference).knn(q, 5);
            let mut all: Vec<(f64, usize)> = reference
                .iter()
                .enumerate()
                .map(|(i, p)| (dist2(q, p), i))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, all[..5].to_vec());
        }
    }

    #[test]
    fn duplicate_points_tie_break_by_index() {
        let mut reference = vec![[0.5, 0.5, 0.5]; 100];
        reference.extend(lcg_points(100, 3));
        let got = GridIndex::new(&reference).knn(&[0.5, 0.5, 0.5], 3);
        assert_eq!(got.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
