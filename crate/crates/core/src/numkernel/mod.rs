//! Dense numeric kernel: matrices, seeded randomness and special functions.

mod matrix;
mod rng;
mod special;

pub(crate) use matrix::gemm_into;
pub use matrix::{dot, gemm, norm, Matrix, Transpose};
pub use rng::{gaussian_vector, Rng};
pub use special::{erf, erfc, inverse_normal_cdf, normal_cdf, normal_pdf};
