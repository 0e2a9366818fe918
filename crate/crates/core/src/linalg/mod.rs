//! Dense matrices and the thin SVD used to build low-rank projectors.

pub mod matrix;
pub mod svd;

pub use matrix::{gemm, MatMut, MatRef, Matrix};
pub use svd::{reconstruct, thin_svd, thin_svd_with_tol, truncate, ThinSvd, Truncated};
