//! Synthetic brain-image generation from anatomical label maps, with
//! corruption presets, an anatomy-guided reconstruction loss, closed-form
//! one-layer adapters and feature-robustness metrics.

pub mod adaptation;
pub mod corruption;
pub mod deformation;
pub mod error;
pub mod filter;
pub mod generator;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod robustness;
pub mod seed;
pub mod synthesis;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Geometry, LabelMap, Mask, Volume, VolumeStack};
