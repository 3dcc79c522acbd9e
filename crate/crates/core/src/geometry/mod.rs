//! Geometric kernels and evaluation metrics on point clouds.

mod cloud;
mod grid;
pub mod io;
mod metrics;
pub mod oracle;
mod sampling;

pub use cloud::{dist2, dot3, householder, reflect_about_plane, Point3, PointCloud};
pub use grid::{knn_indices, nearest, GridIndex};
pub use metrics::{
    chamfer_l1, chamfer_l2, f1_score, fidelity_distance, mmd, nearest_sq_distances, MetricsRecord,
    F1_THRESHOLD,
};
pub use sampling::{fps, knn};
