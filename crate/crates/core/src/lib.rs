//! Memory-efficient backpropagation through rank-1 sub-token compression.
//!
//! The forward pass of a compressed linear layer splits every input token into
//! contiguous sub-tokens of size `M`, projects each one onto a fixed unit
//! vector `v`, and saves only the resulting scalars. The backward pass
//! rebuilds a coarse input `(z·v)vᵀ` from those scalars to form the weight
//! gradient, while the input gradient still uses the exact weights.
//!
//! Modules:
//! - [`tensor`]: the dense array type everything else is built on.
//! - [`compression`]: grouping, compress/reconstruct and the projection-vector
//!   initialisation strategies.
//! - [`autograd`]: manually differentiated layers, blocks, losses and optimisers.
//! - [`analysis`]: stable rank, similarity divergence and sparsity diagnostics.
//! - [`memledger`]: exact accounting of what the forward pass keeps for backward.
//! - [`gradcheck`]: the central finite-difference suite over every layer type.

pub mod analysis;
pub mod autograd;
pub mod compression;
mod error;
pub mod gradcheck;
pub mod memledger;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
