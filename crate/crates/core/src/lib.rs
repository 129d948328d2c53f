//! Analytical models and pure numeric kernels for training with model states
//! offloaded across device, host and NVMe memory.
//!
//! This crate is `#![no_std]` and only needs `alloc`. Everything that touches
//! files, threads or the command line lives in the `infinisim` crate.
//!
//! Modules:
//!
//! - [`memory`]: parameter counts, model-state bytes, activation and working-memory sizes.
//! - [`efficiency`]: arithmetic intensity, the efficiency/bandwidth relation and sweeps.
//! - [`placement`]: placement strategies, feasibility, maximum model size, bandwidth tables.
//! - [`overlap`]: operator traces, prefetch plans and the lane-based timeline simulator.
//! - [`tiling`]: row-block tiling of linear operators and the fragmentation model.
//! - [`collective`]: shard arithmetic and the fixed-order reduce-scatter.
//! - [`adam`]: the mixed-precision Adam update applied chunk by chunk.
//! - [`mlp`]: forward/backward of the small layered models used by the training harness.

#![no_std]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod adam;
pub mod collective;
pub mod config;
pub mod dtype;
pub mod efficiency;
pub mod error;
pub mod memory;
pub mod mlp;
pub mod overlap;
pub mod placement;
pub mod tier;
pub mod tiling;

pub use config::{ClusterConfig, ModelConfig};
pub use dtype::{DType, Element, TypedArray};
pub use error::{Error, Result};
pub use tier::TierKind;
