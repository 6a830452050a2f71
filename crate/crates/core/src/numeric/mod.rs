//! Dense f64 arrays, tape-based reverse-mode differentiation, layers, and the
//! adaptive-moment optimizer.

mod layers;
mod params;
mod tape;
mod tensor;

pub mod gradcheck;

pub use layers::{step_embedding, step_embeddings, GruCell, Linear, Mlp};
pub use params::{AdamConfig, Gradients, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
