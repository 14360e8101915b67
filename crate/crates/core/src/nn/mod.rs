//! Differentiable layer set: grouped convolution, batch normalization,
//! ReLU, global average pooling, linear head and softmax cross-entropy.

pub mod conv;
pub mod layers;
pub mod norm;
pub mod ops;

pub use conv::{conv2d, ConvGeometry, ConvParams};
pub use layers::{BatchNorm2d, Conv2d, Linear};
pub use norm::{batchnorm2d, BatchNormParams, Mode, BN_EPSILON, BN_MOMENTUM};
pub use ops::{global_avg_pool, he_init, linear, relu, softmax, softmax_cross_entropy};
