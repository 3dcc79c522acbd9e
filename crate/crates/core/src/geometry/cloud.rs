use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// An ordered, non-empty set of 3D points with finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("point cloud must contain at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Domain(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if data.len() % 3 != 0 {
            return Err(Error::Format(format!(
                "flat coordinate buffer length {} is not a multiple of 3",
                data.len()
            )));
        }
        Self::new(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn get(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    /// Points at the given indices, in index order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.points.get(i).ok_or_else(|| {
                Error::Size(format!("index {i} out of range for cloud of {}", self.len()))
            })?;
            out.push(*p);
        }
        Self::new(out)
    }

    /// Concatenation `[self; other]`.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }

    /// Each point repeated `r` times: point `i` occupies rows `i*r .. i*r + r`.
    pub fn repeat_each(&self, r: usize) -> PointCloud {
        let r = r.max(1);
        let points = self
            .points
            .iter()
            .flat_map(|p| std::iter::repeat_n(*p, r))
            .collect();
        PointCloud { points }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dot3(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Mirror every point about the plane through the origin with the given normal:
/// `x - 2 (n.x / |n|^2) n`.
pub fn reflect_about_plane(cloud: &PointCloud, normal: Point3) -> Result<PointCloud> {
    let nn = dot3(&normal, &normal);
    if !(nn > 0.0) || !nn.is_finite() {
        return Err(Error::Domain("reflection normal must be non-zero and finite".into()));
    }
    let points = cloud
        .points
        .iter()
        .map(|x| {
            let s = 2.0 * dot3(&normal, x) / nn;
            [x[0] - s * normal[0], x[1] - s * normal[1], x[2] - s * normal[2]]
        })
        .collect();
    Ok(PointCloud { points })
}

/// Householder matrix `I - 2 n n^T / |n|^2`, row-major.
pub fn householder(normal: Point3) -> Result<[f64; 9]> {
    let nn = dot3(&normal, &normal);
    if !(nn > 0.0) || !nn.is_finite() {
        return Err(Error::Domain("reflection normal must be non-zero and finite".into()));
    }
    let mut h = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            let id = if r == c { 1.0 } else { 0.0 };
            h[r * 3 + c] = id - 2.0 * normal[r] * normal[c] / nn;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::Domain(_))));
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn mirror_about_x_zero() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let r = reflect_about_plane(&c, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.points(), &[[-1.0, 2.0, 3.0]]);
    }

    #[test]
    fn points_on_plane_are_fixed() {
        let c = PointCloud::new(vec![[0.0, 0.0, -3.0], [1.0, -1.0, 5.0]]).unwrap();
        let r = reflect_about_plane(&c, [1.0, 1.0, 0.0]).unwrap();
        for (a, b) in c.points().iter().zip(r.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_normal_is_domain_error() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            reflect_about_plane(&c, [0.0; 3]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn repeat_each_layout() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        let r = c.repeat_each(3);
        assert_eq!(r.len(), 6);
        assert_eq!(r.get(2), [0.0; 3]);
        assert_eq!(r.get(3), [1.0; 3]);
    }
}
