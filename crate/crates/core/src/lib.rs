//! Object intrinsics from a single image of many instances: latent-conditioned
//! neural fields, a differentiable SDF volume renderer with Phong shading,
//! adversarial training against instance crops, and inference utilities.

pub mod adversarial;
pub mod error;
pub mod fields;
pub mod inference;
pub mod model;
pub mod raster;
pub mod render;
pub mod scene;
pub mod shading;
pub mod training;

pub use error::{Error, Result};
