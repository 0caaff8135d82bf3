//! Precoder design and sensing metrics for an integrated sensing and
//! communication base station built around a transmissive surface array.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ao;
pub mod array_channel;
pub mod conic;
pub mod detection;
pub mod error;
pub mod estimation;
pub mod fim;
pub mod linalg;
pub mod rsma;
pub mod scenario;
pub mod seeds;
pub mod tracking;

pub use error::{Error, Result};
