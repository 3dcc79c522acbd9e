use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::grid::nearest;
use crate::error::{Error, Result};

/// Default F1 matching threshold in normalized model units.
pub const F1_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub f1_at_1pct: f64,
    pub fd: f64,
    pub mmd: f64,
}

/// Squared distance from each point of `from` to its nearest point in `to`.
pub fn nearest_sq_distances(from: &PointCloud, to: &PointCloud) -> Vec<f64> {
    nearest(from.points(), to.points())
        .into_iter()
        .map(|(d, _)| d)
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Half the sum of the two directional mean Euclidean nearest-neighbour distances.
pub fn chamfer_l1(p: &PointCloud, q: &PointCloud) -> f64 {
    let pq = nearest_sq_distances(p, q);
    let qp = nearest_sq_distances(q, p);
    0.5 * (mean(pq.iter().map(|d| d.sqrt()), pq.len()) + mean(qp.iter().map(|d| d.sqrt()), qp.len()))
}

/// Sum of the two directional mean squared nearest-neighbour distances.
pub fn chamfer_l2(p: &PointCloud, q: &PointCloud) -> f64 {
    let pq = nearest_sq_distances(p, q);
    let qp = nearest_sq_distances(q, p);
    mean(pq.iter().copied(), pq.len()) + mean(qp.iter().copied(), qp.len())
}

pub fn f1_score(p: &PointCloud, q: &PointCloud, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!("F1 threshold must be positive, got {threshold}")));
    }
    let hits = |ds: Vec<f64>| ds.iter().filter(|d| d.sqrt() < threshold).count() as f64 / ds.len() as f64;
    let precision = hits(nearest_sq_distances(p, q));
    let recall = hits(nearest_sq_distances(q, p));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean distance from each input point to the closest output point (one direction only).
pub fn fidelity_distance(input: &PointCloud, output: &PointCloud) -> f64 {
    let d = nearest_sq_distances(input, output);
    mean(d.iter().map(|x| x.sqrt()), d.len())
}

/// Smallest `chamfer_l2` between `output` and any gallery member.
pub fn mmd(output: &PointCloud, gallery: &[PointCloud]) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::Domain("MMD gallery is empty".into()));
    }
    Ok(gallery
        .iter()
        .map(|g| chamfer_l2(output, g))
        .fold(f64::INFINITY, f64::min))
}
