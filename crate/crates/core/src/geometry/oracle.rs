//! Quadratic reference implementations, used by `selftest` and the benchmarks
//! to cross-check the grid-accelerated kernels.

use super::cloud::{dist2, Point3};

/// `k` nearest reference indices per query by full scan, ordered by
/// `(distance, index)`.
pub fn knn_scan(queries: &[Point3], reference: &[Point3], k: usize) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> = reference.iter().enumerate().map(|(i, r)| (dist2(q, r), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, i)| i).collect()
        })
        .collect()
}

pub fn nearest_sq_scan(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn chamfer_l1_scan(p: &[Point3], q: &[Point3]) -> f64 {
    let a = nearest_sq_scan(p, q);
    let b = nearest_sq_scan(q, p);
    let m = |v: &[f64]| v.iter().map(|d| d.sqrt()).sum::<f64>() / v.len() as f64;
    0.5 * (m(&a) + m(&b))
}

pub fn chamfer_l2_scan(p: &[Point3], q: &[Point3]) -> f64 {
    let a = nearest_sq_scan(p, q);
    let b = nearest_sq_scan(q, p);
    a.iter().sum::<f64>() / a.len() as f64 + b.iter().sum::<f64>() / b.len() as f64
}

pub fn fidelity_scan(input: &[Point3], output: &[Point3]) -> f64 {
    let a = nearest_sq_scan(input, output);
    a.iter().map(|d| d.sqrt()).sum::<f64>() / a.len() as f64
}
