//! Decision stack for offloaded mixed-precision training on tightly coupled
//! GPU-CPU packages.
//!
//! The crate has two halves:
//!
//! * an analytic side ([`hwmodel`], [`memplan`], [`partition`], [`simsched`])
//!   that predicts memory footprints, transfer and casting costs, bucket
//!   layouts, and per-resource schedules for synchronize-then-execute and
//!   speculate-then-validate optimizer pipelines;
//! * an exact numeric side ([`numcore`]) that trains tiny models in mixed
//!   precision and checks the speculative optimizer against a synchronous
//!   reference bit for bit.
//!
//! Data-parallel loops (grid searches, seed matrices, optimizer tiles, norm
//! partials) go through [`par::Exec`], which uses rayon when the `parallel`
//! feature is enabled and runs sequentially otherwise.

pub mod error;
pub mod hwmodel;
pub mod memplan;
pub mod numcore;
pub mod par;
pub mod partition;
pub mod simsched;

pub use error::{Error, Result};

/// Bytes in one mebibyte.
pub const MIB: u64 = 1 << 20;
/// Bytes in one gibibyte.
pub const GIB: u64 = 1 << 30;
