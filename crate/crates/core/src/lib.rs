pub mod cdc;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod localize;
pub mod network;
pub mod ops;
pub mod pipeline;
pub mod seed;
pub mod tensor;

pub use error::{CdcError, Result};
pub use tensor::{linear_index, FillRule, Shape, Tensor};
