pub mod arch;
pub mod autodiff;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod parallel;
pub mod separate;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
