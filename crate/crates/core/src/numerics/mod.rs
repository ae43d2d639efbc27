//! Dense tensors, reverse-mode differentiation, seeded sampling and the small
//! amount of linear algebra the rest of the crate needs.

pub mod linalg;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use linalg::{cholesky, cosine_similarity, mean_and_covariance, sample_gaussian, CholeskyFactor};
pub use rng::Rng;
pub use tape::{Gradients, Graph, Var};
pub use tensor::{dot, l2_norm, sq_dist, Tensor};
