//! Online test-time training on streams.
//!
//! The crate is `no_std` (with `alloc`) and free of IO: stream generators, the
//! quadratic and neural model families, the sliding-window memory, the
//! per-frame adaptation loop with its baselines, and closed-form oracles for
//! the window-size bias-variance bound.

#![no_std]

extern crate alloc;

pub mod error;
pub mod linalg;
pub mod memory;
pub mod models;
pub mod rng;
pub mod streamgen;
pub mod theory;
pub mod tttloop;

pub use error::{Error, Result};
