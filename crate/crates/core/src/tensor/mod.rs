//! Dense matrices and a reverse-mode tape over them.

mod autodiff;
mod matrix;
pub mod ops;

pub use autodiff::{Gradients, Graph, Var};
pub use matrix::Matrix;
pub use ops::Axis;
