//! Dense 2D tensors with reverse-mode differentiation and the layers built on
//! them.

pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use nn::{Activation, Adjacency, Embedding, GcnLayer, GruCell, Linear, Mlp, MultiHeadAttention};
pub use params::{Adam, AdamConfig, Checkpoint, GradAccumulator, LrSchedule, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
