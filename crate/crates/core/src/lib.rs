//! Library for a deep-learning precipitation post-processor at desk scale:
//! a tensor autodiff engine, a synthetic gridded-NWP data generator with a
//! binary file format, rainfall-threshold labeling with continuous (density
//! proportional) smoothing, a masked-reconstruction pre-training model with
//! a deformable-aggregation encoder, two-phase training with frozen-encoder
//! transfer, and contingency-table forecast verification.

pub mod grid;
pub mod tensor;

pub use tensor::{ExecMode, Graph, NodeId, Real, Tensor, TensorError};
