//! 4D neural network operators with hand-written backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod pool;

pub use activation::{leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, DEFAULT_LEAKY_SLOPE};
pub use batchnorm::{BatchNorm4d, BatchNormCache, BatchNormGrads, Mode};
pub use conv::{Conv4d, Conv4dGrads};
pub use loss::mse_loss;
pub use pool::{maxpool4d, maxpool4d_backward, upsample4d, upsample4d_backward, ArgmaxMap};
