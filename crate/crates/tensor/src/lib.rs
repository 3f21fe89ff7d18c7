//! Minimal reverse-mode automatic differentiation for the adaptation pipeline.
//!
//! [`Tape`] records a define-by-run graph of dense [`Tensor`] ops; parameters
//! live in a [`ParamSet`] and are bound to fresh tape leaves on every forward
//! pass. [`sgd_step`] applies momentum SGD per parameter group.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Result, TensorError};
pub use optim::{sgd_step, SgdMomentumState};
pub use params::{Bindings, ParamEntry, ParamKind, ParamSet};
pub use scalar::Real;
pub use tape::{Gradients, OpKind, Tape, TapeNode, Var};
pub use tensor::Tensor;
