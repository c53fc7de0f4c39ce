//! Reverse-mode differentiation, MLPs and positional encoding.

mod checkpoint;
mod encoding;
mod gradcheck;
mod matrix;
mod mlp;
mod params;
mod tape;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use encoding::{encode, encoded_width, positional_encode, EncodingConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use mlp::{mlp_forward, Dense, Mlp, MlpSpec};
pub use params::{seeded_rng, Block, BlockId, Gradients, ParameterStore};
pub use tape::{sigmoid, softplus, Activation, CustomOp, Tape, TapeGradients, Var};
