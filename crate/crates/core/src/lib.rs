//! Subject-driven fine-tuning with point-annotated reference images.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod fixtures;
pub mod image;
pub mod injection;
pub mod losses;
pub mod optim;
pub mod rngr;
pub mod sampler;
pub mod service;
pub mod trainer;

pub use error::{Error, Result};
