// `!(x > bound)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod evalkit;
pub mod geometry;
pub mod prior;
pub mod scenegen;
pub mod training;
pub mod vecnet;
