//! Desk-scale execution of offloaded data-parallel training.
//!
//! [`store`] is a capacity-checked device / host / NVMe store with
//! asynchronous tickets. [`partition`] shards tensors across simulated ranks
//! on top of it. [`tiled`] runs large linear layers tile by tile, and
//! [`train`] trains small layered models with every model state partitioned
//! and offloaded. [`baseline`] is the same model kept in plain vectors; the
//! two must agree bit for bit. [`flatcfg`] and [`cli`] provide the
//! `infinisim` command.

pub mod baseline;
pub mod cli;
pub mod flatcfg;
pub mod partition;
pub mod store;
pub mod tiled;
pub mod train;

pub use infinisim_core as models;

use store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] infinisim_core::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layer {layer} reads `{key}` without it in its fetch set (register it as an external parameter)")]
    MissingParam { layer: usize, key: String },
    #[error("unknown parameter `{0}`")]
    UnknownKey(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
}
