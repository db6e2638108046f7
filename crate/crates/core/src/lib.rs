//! Tensor containers, differentiable dense ops, and the optimization
//! utilities shared by the forecasting crates.

pub mod checkpoint;
pub mod corr;
pub mod dconv;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod linalg;
pub mod net;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod warp;

pub use error::{CoreError, Result};
pub use tensor::{Dtype, Scalar, Tensor};
