//! Vector quantization followed by optimal-transport pooling onto learnable
//! references, with a small segmentation model built around it.

pub mod bench;
pub mod data;
pub mod error;
pub mod kmeans;
pub mod l2gmapper;
pub mod metrics;
pub mod numerics;
pub mod quantizer;
pub mod registry;
pub mod segmodel;
pub mod sinkhorn;

pub use error::{Error, Result};
