//! Articulated 3D shape and pose learning from 2D keypoints: meshes and
//! spectral bases, SE(3) utilities, the part-based deformation model, its
//! losses, the regression networks and the training, synthesis and
//! evaluation code around them.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod lie;
pub mod loss;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};
