use super::cloud::{dist2, PointCloud};
use super::grid::knn_indices;
use crate::error::{Error, Result};

/// Greedy farthest point sampling starting at `seed`.
///
/// Each step picks the point whose minimum distance to the already selected
/// set is largest; ties go to the lowest index.
pub fn fps(cloud: &PointCloud, m: usize, seed: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Size(format!(
            "cannot sample {m} points from a cloud of {n}"
        )));
    }
    if seed >= n {
        return Err(Error::Size(format!(
            "seed index {seed} out of range for cloud of {n}"
        )));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed;
    selected.push(current);
    taken[current] = true;
    while selected.len() < m {
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(&pts[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        taken[current] = true;
        selected.push(current);
    }
    Ok(selected)
}

/// For each query, the `k` closest reference indices sorted by distance
/// (ties broken by lowest index).
pub fn knn(queries: &PointCloud, reference: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > reference.len() {
        return Err(Error::Size(format!(
            "k = {k} is invalid for a reference cloud of {}",
            reference.len()
        )));
    }
    Ok(knn_indices(queries.points(), reference.points(), k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> PointCloud {
        PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn single_point() {
        let c = PointCloud::new(vec![[0.3, 0.2, 0.1]]).unwrap();
        assert_eq!(fps(&c, 1, 0).unwrap(), vec![0]);
    }

    #[test]
    fn square_picks_diagonal_corner() {
        assert_eq!(fps(&square(), 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn full_selection_is_permutation() {
        let mut got = fps(&square(), 4, 0).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_many_is_size_error() {
        assert!(matches!(fps(&square(), 5, 0), Err(Error::Size(_))));
        assert!(matches!(fps(&square(), 2, 4), Err(Error::Size(_))));
    }

    #[test]
    fn knn_line() {
        let q = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let r = PointCloud::new(vec![[3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(knn(&q, &r, 2).unwrap(), vec![vec![1, 2]]);
        assert!(matches!(knn(&q, &r, 4), Err(Error::Size(_))));
    }

    #[test]
    fn knn_self_match() {
        let c = square();
        let got = knn(&c, &c, 1).unwrap();
        assert_eq!(got, vec![vec![0], vec![1], vec![2], vec![3]]);
    }
}
