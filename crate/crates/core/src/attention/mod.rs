//! Attention modules mapping (N,C,H,W) to (N,C,H,W).

pub mod cbam;
pub mod gate;
pub mod se;
pub mod triplet;

use serde::{Deserialize, Serialize};

pub use cbam::CbamState;
pub use gate::AttentionGateState;
pub use se::SeState;
pub use triplet::{RotationVariant, TripletAttentionConfig, TripletAttentionState};

use crate::error::Result;
use crate::module::{Context, Module, ParamKind};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor4;

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_KERNEL: usize = 7;

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}
fn default_kernel() -> usize {
    DEFAULT_KERNEL
}

/// Which attention module a backbone inserts into each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttentionSpec {
    None,
    Se {
        #[serde(default = "default_reduction")]
        reduction: usize,
    },
    Cbam {
        #[serde(default = "default_reduction")]
        reduction: usize,
        #[serde(default = "default_kernel")]
        k: usize,
    },
    Triplet(TripletAttentionConfig),
}

impl AttentionSpec {
    pub fn build<T: Scalar>(&self, name: &str, channels: usize, seed: u64) -> Result<Option<AttentionModule<T>>> {
        Ok(match *self {
            AttentionSpec::None => None,
            AttentionSpec::Se { reduction } => Some(AttentionModule::Se(SeState::new(name, channels, reduction, seed)?)),
            AttentionSpec::Cbam { reduction, k } => {
                Some(AttentionModule::Cbam(CbamState::new(name, channels, reduction, k, seed)?))
            }
            AttentionSpec::Triplet(cfg) => Some(AttentionModule::Triplet(TripletAttentionState::new(name, cfg, seed)?)),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            AttentionSpec::None => "none",
            AttentionSpec::Se { .. } => "se",
            AttentionSpec::Cbam { .. } => "cbam",
            AttentionSpec::Triplet(_) => "triplet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionModule<T> {
    Se(SeState<T>),
    Cbam(CbamState<T>),
    Triplet(TripletAttentionState<T>),
}

impl<T: Scalar> AttentionModule<T> {
    pub fn name(&self) -> &str {
        match self {
            AttentionModule::Se(s) => &s.name,
            AttentionModule::Cbam(s) => &s.name,
            AttentionModule::Triplet(s) => &s.name,
        }
    }

    pub fn mechanism(&self) -> &'static str {
        match self {
            AttentionModule::Se(_) => "se",
            AttentionModule::Cbam(_) => "cbam",
            AttentionModule::Triplet(_) => "triplet",
        }
    }

    /// Reduction ratio for MLP-based modules.
    pub fn reduction(&self) -> Option<usize> {
        match self {
            AttentionModule::Se(s) => Some(s.mlp.reduction),
            AttentionModule::Cbam(s) => Some(s.mlp.reduction),
            AttentionModule::Triplet(_) => None,
        }
    }

    /// Gate kernel size for conv-based modules.
    pub fn kernel(&self) -> Option<usize> {
        match self {
            AttentionModule::Se(_) => None,
            AttentionModule::Cbam(s) => Some(s.spatial.kernel()),
            AttentionModule::Triplet(s) => Some(s.config.k),
        }
    }
}

impl<T: Scalar> Module<T> for AttentionModule<T> {
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        match self {
            AttentionModule::Se(s) => s.forward(ctx, x),
            AttentionModule::Cbam(s) => s.forward(ctx, x),
            AttentionModule::Triplet(s) => s.forward(ctx, x),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        match self {
            AttentionModule::Se(s) => s.visit(f),
            AttentionModule::Cbam(s) => s.visit(f),
            AttentionModule::Triplet(s) => s.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        match self {
            AttentionModule::Se(s) => s.visit_mut(f),
            AttentionModule::Cbam(s) => s.visit_mut(f),
            AttentionModule::Triplet(s) => s.visit_mut(f),
        }
    }
}

/// Zeroes every learnable weight and bias (keeps batchnorm γ at 1, β at 0).
pub fn zero_weights<T: Scalar>(m: &mut dyn Module<T>) {
    m.visit_mut(&mut |name, kind, t| {
        let zero = match kind {
            ParamKind::ConvWeight | ParamKind::MlpWeight | ParamKind::Bias => true,
            ParamKind::BnAffine => name.ends_with(".beta"),
            ParamKind::RunningStat => false,
        };
        if zero {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    });
}
