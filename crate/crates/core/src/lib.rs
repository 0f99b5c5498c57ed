//! Salient object detection with a ladder of dense cross-level decoders.
//!
//! The crate covers the network ([`model::Lc3Net`]), its losses, the standard
//! saliency metrics, data loading and augmentation, and training.

pub mod bcd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcm;
pub mod error;
pub mod fcb;
pub mod feature;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use lc3net_tensor as tensor;
