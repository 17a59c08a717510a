//! Bi-encoder cross-modal retrieval with adaptive pooling and adaptive negative sampling.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` matrices, the differentiable primitives and a
//!   finite-difference gradient checker;
//! * [`pooling`]: mean / max / K-max pooling and the learned token-level,
//!   embedding-level and balance pooling;
//! * [`objectives`]: hard triplet loss, alignment / uniformity, the adaptive
//!   negative count and K-negative InfoNCE;
//! * [`encoder`] and [`data`]: projection encoders and a seeded synthetic corpus;
//! * [`cache`]: the binary matrix file format;
//! * [`training`] and [`evaluation`]: Adam training loop, Recall@K and RSUM.

pub mod cache;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod objectives;
pub mod pooling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Matrix;
