// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod bench;
pub mod corruptions;
pub mod energy;
pub mod error;
pub mod grad;
pub mod model;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
