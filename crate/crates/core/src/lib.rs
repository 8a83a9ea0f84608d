// `!(x > y)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod fusion;
pub mod mask;
pub mod phantom;
pub mod prompt_sim;
pub mod stats;
pub mod volume;
