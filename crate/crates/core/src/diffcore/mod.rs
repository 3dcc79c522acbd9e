//! Minimal reverse-mode differentiation: shaped `f64` arrays, a tape of the
//! operators the networks need, AdamW, and a binary checkpoint format.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, restore_into, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use graph::{ChamferKind, Graph, Var};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
