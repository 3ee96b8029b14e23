// NaN must fail validation, so `!(x > 0.0)` is intended; index loops mirror the math.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::single_range_in_vec_init
)]

pub mod blended;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod netsim;
pub mod recipes;

pub use error::{Error, Result};
