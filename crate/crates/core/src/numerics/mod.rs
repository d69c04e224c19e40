//! Dense matrices, stable reductions and seeded randomness.

mod gradcheck;
mod matrix;
mod rng;
mod stable;

pub use gradcheck::{grad_check, grad_check_richardson, GradCheckReport};
pub use matrix::{argmax, Matrix};
pub use rng::{derive_seed, mix64, Rng};
pub use stable::{
    cosine_similarity, l2_distance, l2_norm, log_sum_exp, relu, softmax, softmax_f64,
    spectral_norm, SpectralNorm,
};
pub(crate) use stable::{log_softmax_slice, lse_slice, softmax_slice};
