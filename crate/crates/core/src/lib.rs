// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod datagen;
pub mod error;
pub mod flow;
pub mod observational;
pub mod optim;
pub mod query;
pub mod rng;
pub mod sensitivity;
pub mod stage2;
pub mod stats;

pub use error::{Error, Result};
