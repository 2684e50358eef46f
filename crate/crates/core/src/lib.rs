//! Ring-type transformer for heterogeneous graphs: ring tokenization,
//! a small autodiff tensor core, the two-level encoder, training and
//! downstream evaluation.

pub mod embeddings;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod rings;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::{ParamStore, Tape, Tensor, TensorError, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::RingTypeTransformer<f32>;
pub type Model64 = model::RingTypeTransformer<f64>;
pub type Trainer32<'a> = train::Trainer<'a, f32>;
pub type Trainer64<'a> = train::Trainer<'a, f64>;
