//! Multi-level feature fusion for semantic segmentation.
//!
//! The crate bundles a small reverse-mode autodiff core ([`tensor`]), five
//! fusion strategies including gated fully fusion ([`fusion`]), pyramid
//! pooling and a dense feature pyramid ([`context`]), a compact segmentation
//! network ([`network`]), a training and evaluation harness ([`training`],
//! [`metrics`]) and a synthetic street-scene generator ([`data`]).

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod cli;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod export;
pub mod fusion;
pub mod inspect;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
