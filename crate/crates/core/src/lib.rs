//! Pixel-based document language modelling toolkit.
//!
//! Synthetic scans are rendered from text, degraded to look historical,
//! and used to pretrain a patch masked autoencoder that later serves
//! downstream classification, pixel question answering and retrieval.

pub mod corpus;
pub mod degrade;
pub mod manifest;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod scan;
pub mod search;
pub mod seed;
pub mod tasks;

pub use masking::{PatchGrid, PatchMask};
pub use scan::{PixelBox, Raster, Scan, ScanMeta, PATCH_SIZE};
