//! Core of a desk-scale simulator for eavesdropping and covert defenses in learned
//! semantic communication.
//!
//! Everything here needs only `alloc`; the `std` feature (on by default) merely forwards to
//! the `std` features of the dependencies.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is the NaN-rejecting form used throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod attacks;
pub mod codec;
pub mod conv;
pub mod data;
pub mod error;
pub mod generator;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod steg;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nn::{Adam, ParamSet};
pub use tensor::{Scalar, Tensor};
