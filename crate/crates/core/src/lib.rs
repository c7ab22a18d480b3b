#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod recoveries;
pub mod solvers;
pub mod topology;
pub mod vector;
