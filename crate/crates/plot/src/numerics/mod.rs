//! Dense linear algebra, seeded randomness, reverse-mode gradients, Adam,
//! and PCA: the substrate for training backbones and rotation handles.

pub mod adam;
pub mod matrix;
pub mod pca;
pub mod rng;
pub mod tape;

pub use adam::AdamState;
pub use matrix::{dot, l2_norm, sigmoid, softmax, squared_distance, Matrix};
pub use pca::{pca_fit, Pca};
pub use rng::SeedStream;
pub use tape::{grad_check, skew_param_count, Tape};
