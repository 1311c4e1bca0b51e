//! Rating prediction by matrix factorization where each latent vector is
//! assembled from per-view cluster centers instead of being a free parameter.
//!
//! Users and items each hold, per view, a bank of cluster centers and a row of
//! mixing logits. The softmax of the logits weights the centers of that view,
//! the weighted sums are concatenated across views, and the dot product of the
//! two composed vectors (plus optional bias terms) predicts the rating.
//! Training minimizes the rating error together with terms that push centers
//! apart, pull entities toward their assigned center, and sharpen the mixing
//! weights; underused centers are pruned away as training progresses.

pub mod baselines;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
