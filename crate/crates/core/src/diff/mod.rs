//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records forward operations on [`Array`] values and parameter
//! handles from a [`ParamStore`]; [`Graph::backward`] returns per-parameter
//! [`Gradients`]. Operators not provided here plug in through [`CustomOp`].

mod array;
mod check;
mod graph;
mod params;

pub use array::{dot, Array};
pub use check::{finite_diff_check, FdReport, GRAD_FLOOR};
pub use graph::{gelu, normal_cdf, normal_pdf, sigmoid, CustomOp, Graph, Var};
pub use params::{glorot, uniform, Gradients, ParamId, ParamStore};
