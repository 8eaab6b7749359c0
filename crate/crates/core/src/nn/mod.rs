//! Dense linear algebra and reverse-mode layer primitives.

mod layers;
mod matrix;
mod rng;

pub use layers::{
    kl_divergence, relu, relu_backward, sgd_step, softmax, softmax_cross_entropy, softmax_rows,
    CrossEntropy, GradReversal, Linear, LinearCache, Param,
};
pub use matrix::{dot, norm, squared_distance, Matrix};
pub use rng::{gaussian_sample, RngStream};
