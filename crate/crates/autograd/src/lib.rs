//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and leaves
//! `d loss / d leaf` on each gradient-requiring leaf.

mod error;
mod gradcheck;
mod graph;
pub mod shape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Elementwise, Graph, Var};
pub use tensor::Tensor;
