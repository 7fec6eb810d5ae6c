//! Left-right comparative recurrent stereo disparity estimation.
//!
//! The crate bundles a small reverse-mode autodiff engine, cost-volume
//! construction (census and a learnable siamese matcher), the recurrent
//! ConvLSTM model with its left-right comparative attention branch, the
//! classical WTA / consistency-check baselines, two-stage training and the
//! synthetic data and evaluation tooling used to exercise all of it.

pub mod audit;
pub mod autodiff;
pub mod checkpoint;
mod conv;
pub mod cost_volume;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod image;
mod init;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use cost_volume::{CostVolume, SiameseWeights};
pub use image::{DisparityMap, GrayImage, View};
pub use model::{LrcrWeights, ModelConfig};
pub use tensor::Tensor;
