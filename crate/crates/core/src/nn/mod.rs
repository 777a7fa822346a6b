//! Layer primitives shared by attention modules and backbones.

pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod mlp;
pub mod pool;

pub use batchnorm::BatchNorm2dState;
pub use conv::{conv_out_len, Conv2dState};
pub use loss::softmax_rows;
pub use mlp::Mlp2State;
