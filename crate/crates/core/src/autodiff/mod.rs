//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use graph::{slog_derivative, slog_value, Graph, Var};
pub(crate) use graph::empty_column_mass;
#[cfg(test)]
pub(crate) use graph::bin_position;
