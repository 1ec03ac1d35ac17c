//! Jacobian-vector products of continuous piecewise-affine networks computed
//! by replaying a forward pass with frozen nonlinearity states.
//!
//! A network made of affine layers and piecewise-linear nonlinearities is
//! affine on each region of its input space: `f(x) = A x + b` with `A`, `b`
//! fixed by the activation pattern of `x`. Recording that pattern once lets
//! `A u` be computed with a single extra forward pass.

pub mod affine;
pub mod bench;
pub mod clone;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod network;
pub mod numerics;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
pub use network::{forward, record_states, FrozenMode, FrozenState, LayerSpec, Network, Node};
pub use numerics::{DenseMatrix, Padding, Tensor};
