#![no_std]
// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod error;
mod variant;

pub mod data;
pub mod encoder;
pub mod eval;
pub mod langcond;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use variant::Variant;
