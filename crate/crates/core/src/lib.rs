//! Animatable, relightable 3D Gaussian avatars.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod pbr;
pub mod raster;
pub mod model;
pub mod sh;
pub mod skinning;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
