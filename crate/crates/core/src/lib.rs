//! Hierarchical layer-grouped prompt tuning for class-incremental learning.
//!
//! A small Vision Transformer is pretrained once and frozen. Each task
//! then learns a root prompt whose key and value halves are projected by
//! per-group bottleneck adapters into implicit prompts shared by every
//! layer of a group; per-layer position incentive embeddings specialise
//! them into the sub-prompts that prefix each attention layer. At test
//! time the sub-prompts of all tasks are fused by two-stage soft task
//! matching.
//!
//! All model math is generic over [`Scalar`]; training runs in `f32`,
//! gradient checking in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod head;
pub mod hlgp;
pub mod metrics;
pub mod optim;
pub mod scalar;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Parameters, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type ContinualState32 = trainer::ContinualState<f32>;
pub type ContinualState64 = trainer::ContinualState<f64>;
