//! Rank-constrained factorized weight modulators for lifelong few-shot
//! image generation, with a desk-scale generator, the cluster-wise mode
//! seeking loss, cluster-balanced diversity metrics and a lifelong harness
//! that keeps the base generator frozen.

pub mod error;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod left;
pub mod lifelong;
pub mod losses;
pub mod netlab;
pub mod scalar;
pub mod tensor;
pub mod toy;

pub use error::{LfsError, Result};
pub use scalar::Scalar;
pub use tensor::{Matrix, Tensor};
