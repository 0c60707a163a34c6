// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chanmodel;
pub mod diffcore;
pub mod error;
pub mod inet;
pub mod objective;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
