//! A small deep-learning framework built around ResNeXt on CIFAR-10 subsets.
//!
//! Layers, from the bottom up:
//!
//! * [`tensor`]: dense NCHW tensors and their kernels.
//! * [`autograd`]: define-by-run reverse-mode differentiation and a
//!   finite-difference checker.
//! * [`nn`]: convolution (grouped), batch norm, ReLU, pooling, linear head,
//!   cross-entropy.
//! * [`model`]: ResNeXt configuration, stage planning, the three equivalent
//!   bottleneck forms and parameter counting.
//! * [`data`]: CIFAR-10 binary parsing, Cifar-2/-5/-10 subsets, augmentation.
//! * [`trainer`]: SGD with momentum, learning-rate schedule, checkpoints.
//! * [`report`]: metrics CSV, SVG plots, run manifests and sweeps.

pub mod autograd;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
