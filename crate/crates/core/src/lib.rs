//! Triplet attention, SE and CBAM on a compact reverse-mode autodiff tensor
//! library, with backbones, complexity accounting, training and Grad-CAM.
//!
//! Everything is generic over a [`Scalar`] element type; the aliases at the
//! crate root fix it to `f64` (the default for all numeric checks) or `f32`.

pub mod attention;
pub mod backbone;
pub mod complexity;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod module;
pub mod nn;
pub mod scalar;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use module::{Context, Mode, Module, ParamKind};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Fill, Perm, Shape, Tensor4};

pub type Tensor = Tensor4<f64>;
pub type Tensor32 = Tensor4<f32>;
pub type TripletAttention = attention::TripletAttentionState<f64>;
pub type TripletAttention32 = attention::TripletAttentionState<f32>;
pub type Cbam = attention::CbamState<f64>;
pub type Se = attention::SeState<f64>;
