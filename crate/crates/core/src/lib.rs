//! Neural radiance field trainer and renderer with two reprojection-based ray
//! priors for novel view extrapolation: random ray casting (virtual rays through
//! recovered surface points, supervised by the observed pixel) and a ray atlas
//! (per-vertex mean training direction substituted when predicting color).

pub mod atlas;
pub mod bvh;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod imageio;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod rng;
pub mod rrc;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
