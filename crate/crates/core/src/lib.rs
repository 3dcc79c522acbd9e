//! Symmetry-guided point cloud completion.
//!
//! The pipeline samples key points from a partial scan, predicts a per-point
//! affine + translation transform that maps them into the missing region
//! ([`lstnet`]), and refines the union with two cascaded attention stages
//! guided by the features of the kept and predicted points ([`sgformer`]).
//! Everything is differentiated by the small tape in [`diffcore`].

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod layers;
pub mod lstnet;
pub mod model;
pub mod selftest;
pub mod sgformer;
pub mod training;

pub use error::{Error, Result};
pub use geometry::PointCloud;
pub use model::{count_params, Completion, SymmCompletion};
pub use training::{GuidanceFlags, ModelConfig};
