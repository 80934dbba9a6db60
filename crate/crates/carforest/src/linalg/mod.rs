//! Numeric kernels: dense solves, sparse Cholesky, derivative-free optimization.

pub mod dense;
pub mod optim;
pub mod sparse;

pub use dense::{dot, Mat};
pub use optim::{nelder_mead, NelderMeadOptions, OptimResult};
pub use sparse::{reverse_cuthill_mckee, CholeskyFactor, CholeskySymbolic, SelectedInverse, SparseSymmetric};
