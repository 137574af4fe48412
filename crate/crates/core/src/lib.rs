//! Desk-scale laboratory for lossless speculative decoding.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`graph`] — dense row-major tensors, generic over the
//!   scalar type, with reverse-mode differentiation on a tape plus a
//!   finite-difference oracle ([`gradcheck`]).
//! * [`baselm`] / [`kvcache`] — a small pre-norm causal transformer with
//!   rotary attention and a rollback-capable KV cache.
//! * [`specformer`] — the parallel draft head that turns one set of hidden
//!   states into `l_d` speculative tokens per step.
//! * [`engine`] — draft → verify → accept loop whose output is
//!   byte-identical to plain greedy decoding no matter what the draft
//!   model proposes.
//! * [`analytics`] — arithmetic-intensity / roofline bookkeeping that
//!   explains when speculative decoding pays off.
//! * [`training`] / [`corpus`] — synthetic corpora, base-model training,
//!   self-distillation, and the memory-frugal draft objective.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; training runs in
//! single precision while gradient checks run in double precision.

#![forbid(unsafe_code)]

pub mod analytics;
pub mod baselm;
pub mod checkpoint;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kvcache;
pub mod param;
pub mod prng;
pub mod scalar;
pub mod specformer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use param::Parameter;
pub use prng::Prng;
pub use scalar::{Precision, Scalar};

/// Single-precision tensor, the training/inference default.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision autodiff tape.
pub type Graph32 = graph::Graph<f32>;
/// Double-precision autodiff tape.
pub type Graph64 = graph::Graph<f64>;
/// Single-precision base language model.
pub type BaseLM32 = baselm::BaseLM<f32>;
/// Double-precision base language model.
pub type BaseLM64 = baselm::BaseLM<f64>;
/// Single-precision draft model.
pub type SpecFormer32 = specformer::SpecFormer<f32>;
/// Double-precision draft model.
pub type SpecFormer64 = specformer::SpecFormer<f64>;
