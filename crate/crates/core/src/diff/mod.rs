//! Dense `f64` tensors and a define-by-run reverse-mode tape carrying exactly
//! the primitives the recommender's forward pass needs.

mod params;
mod tape;
mod tensor;

pub mod gradcheck;

pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;
