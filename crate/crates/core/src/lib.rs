// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod lqr;
pub mod matrix;
pub mod rollout;
pub mod seeding;
pub mod solver;
pub mod verification;

pub use error::{Error, Result};
