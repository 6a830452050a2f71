//! Intention-aware two-stage denoising diffusion for trajectory prediction.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod networks;
pub mod numeric;
pub mod training;

pub use error::{Error, Result};
