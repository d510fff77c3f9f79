//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass over [`Tensor`] values
//! and replays it backwards to produce gradients. [`Graph`] binds a
//! [`ParamStore`] to a tape so model code can pull parameters in as leaves, and
//! [`AdamState`] applies optimizer updates to the store.

mod adam;
mod composite;
mod error;
pub mod gradcheck;
pub mod linalg;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{DiffError, Result};
pub use params::{value_and_grad, GradBuffer, Graph, ParamEntry, ParamId, ParamStore};
pub use tape::{logsumexp_slice, sigmoid, softplus, softplus_inv, Gradients, Tape, Var};
pub use tensor::Tensor;
