//! Dense networks with exact reverse-mode gradients.
//!
//! Networks are plain data ([`MlpParams`]). A forward pass over a batch can
//! record a [`Tape`]; [`MlpParams::backward`] replays it in reverse to get
//! parameter gradients and input gradients in one sweep. Losses that span
//! several networks (policy ascent through a critic, FGSM through both) are
//! composed by chaining input gradients of one tape into the output gradient
//! of another.

mod adam;
pub mod checkpoint;
mod matrix;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{grad, input_grad, mlp_init, Activation, Dense, Gradients, MlpParams, Tape};
pub(crate) use matrix::norm2;
