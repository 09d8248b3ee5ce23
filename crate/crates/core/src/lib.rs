#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod eval;
pub mod moe;
pub mod numerics;
pub mod selftest;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
