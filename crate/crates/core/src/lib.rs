//! Bounded residual gradient networks at desk scale.
//!
//! A small reverse-mode autodiff engine ([`autodiff`]), the bounded-gradient
//! bypass functions ([`bypass`]), convolutional layers ([`layers`]), the
//! residual network builder ([`model`]), losses and the momentum optimizer
//! ([`training`]), affect-evaluation metrics ([`metrics`]) and dataset
//! loaders ([`data`]).

pub mod autodiff;
pub mod bypass;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use bypass::{bypass_eval, bypass_grad, BypassKind};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many};
pub use tensor::Tensor;
