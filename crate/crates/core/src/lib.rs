//! Text-guided generative image compression at desk scale.

pub mod adversarial;
pub mod checkpoint;
pub mod data;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod perceptual;
pub mod ssa;
pub mod synthetic;
pub mod text;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
