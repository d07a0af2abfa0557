//! Matrix algebra, the Cholesky covariance parameterization, and a small
//! reverse-mode autodiff engine.

pub mod autodiff;
pub mod linalg;

pub use autodiff::{Gradients, Graph, Tensor, Var};
pub use linalg::{cholesky_reconstruct, logdet, mahalanobis_sq, mat_inverse, CholParams, CovMatrix};
