//! Differentiable numerical substrate: dense maps, convolution, layer
//! normalization, activations and the 2-D FFT, each with a hand-written
//! backward pass.

pub mod activation;
pub mod conv;
pub mod fft;
pub mod gemm;
pub mod gradcheck;
pub mod linear;
pub mod norm;
mod scalar;
pub mod tensor;

pub use activation::{leaky_relu, sigmoid, squared_relu, LEAKY_SLOPE};
pub use conv::{conv2d, Conv2d, ConvGeometry};
pub use fft::{fft2d, ifft2d, ComplexMap};
pub use linear::{linear, Linear};
pub use norm::{layer_norm, LayerNorm, NormCache};
pub use scalar::Scalar;
pub use tensor::{join, FeatureMap, HasParams, Param};
