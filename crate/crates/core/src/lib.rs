//! Convex neuro-symbolic regression.
//!
//! A LoCaL network ([`local`]) represents a multi-output equation as
//! layers of symbolic activations, products and weighted sums. Its
//! connection pattern is searched by deep Q-learning ([`qlearn`]) over the
//! MDP of [`mdp`], with input-convex networks ([`icnn`]) standing in for
//! the negative reward and Q-function so that action selection is a convex
//! problem. [`probe`] checks the convexity claims numerically.

pub mod config;
pub mod datasets;
pub mod error;
pub mod icnn;
pub mod local;
pub mod mdp;
pub mod matrix;
pub mod metrics;
pub mod par;
pub mod probe;
pub mod qlearn;
pub mod symbols;

pub use error::{DomainError, Error, Result};
pub use matrix::Matrix;
pub use par::Mode;
