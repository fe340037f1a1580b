//! Latency-aware resource provisioning for edge nodes.
//!
//! Requests are placed on edge devices by minimising a drift-plus-penalty
//! objective, device snapshots are exchanged as XML descriptors and refreshed
//! when a workload threshold is crossed, and [`sim`] drives the whole loop in
//! discrete time.

pub mod allocator;
pub mod delay;
pub mod domain;
pub mod error;
pub mod queueing;
pub mod realloc;
pub mod resource_repr;
pub mod sim;

pub use error::{Error, Result};
