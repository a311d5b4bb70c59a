//! Batch channel normalization (BCN) and the classic normalizers it
//! combines, with analytic gradients, finite-difference checking and a
//! small training harness.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layer;
pub mod nn;
pub mod norm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{AxisSet, Shape, Tensor4};
