//! Planning, pricing, and functional verification of data-parallel execution
//! strategies for convolutional network training.
//!
//! A training step can be split across ranks along the sample dimension, the
//! two spatial dimensions, or a mix of the three. This crate models those
//! choices end to end:
//!
//! * [`netgraph`] — layer graph parsing, shape inference, and path
//!   decomposition of branchy networks.
//! * [`dist`] — blocked tensor distributions over a virtual rank grid, halo
//!   exchange index sets, and redistribution (shuffle) plans.
//! * [`kernels`] — serial reference kernels (convolution, pooling, batch
//!   norm, ReLU) that double as the per-rank local compute.
//! * [`simexec`] — a deterministic virtual-rank executor that runs one
//!   training step through explicit message passing and records an event log.
//! * [`perfmodel`] — an alpha-beta communication model plus a measured cost
//!   table, giving per-layer time, byte, and memory estimates.
//! * [`planner`] — candidate enumeration and shortest-path selection of a
//!   per-layer partitioning strategy.
//! * [`verify`] — the serial-oracle comparison harness used by the CLI and
//!   the test suite.
//! * [`synth`] — seeded generation of synthetic tensors and networks.

pub mod dist;
pub mod kernels;
pub mod netgraph;
pub mod perfmodel;
pub mod planner;
pub mod simexec;
pub mod synth;
pub mod verify;

pub use netgraph::{NetworkGraph, TensorShape};
