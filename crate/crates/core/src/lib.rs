//! Black-box resource profiling and resource-consumption emulation.
//!
//! [`sampler`] runs a command and records time series of compute, memory
//! and storage consumption into a [`model::Profile`]. [`store`] persists
//! profiles keyed by command and tags. [`emulator`] replays a profile with
//! synthetic atoms that consume the same resources.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod exec;
pub mod emulator;
pub mod model;
pub mod sampler;
pub mod store;
pub mod telemetry;

#[doc(hidden)]
pub mod testutil;
