//! Shared numeric kernels: K-means, 1-D Gaussian mixtures, BFGS and
//! finite-difference gradients. Everything runs in `f64`.

mod bfgs;
mod finite_diff;
mod gmm;
mod kmeans;

pub use bfgs::{bfgs_minimize, BfgsReport};
pub use finite_diff::{finite_diff_grad, relative_error};
pub use gmm::{gmm_assign, gmm_em_1d, GmmModel};
pub use kmeans::{kmeans, kmeans_with, KMeansOptions, KMeansResult};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("empty input")]
    EmptyInput,
    #[error("insufficient distinct points: need {needed}, found {found}")]
    InsufficientDistinctPoints { needed: usize, found: usize },
    #[error("non-finite objective")]
    NonFiniteObjective,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
