use crate::error::Result;
use crate::module::{Context, Module, ParamKind};
use crate::nn::{BatchNorm2dState, Conv2dState};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor4;

/// Z-pool → k×k conv (2→1, shape preserving, no bias) → batchnorm → sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGateState<T> {
    pub name: String,
    pub conv: Conv2dState<T>,
    pub bn: BatchNorm2dState<T>,
}

impl<T: Scalar> AttentionGateState<T> {
    pub fn new(name: impl Into<String>, k: usize, seed: u64) -> Result<Self> {
        let name = name.into();
        Ok(AttentionGateState {
            conv: Conv2dState::shape_preserving(format!("{name}.conv"), 2, 1, k, seed)?,
            bn: BatchNorm2dState::new(format!("{name}.bn"), 1),
            name,
        })
    }

    pub fn kernel(&self) -> usize {
        self.conv.kernel()
    }
}

impl<T: Scalar> Module<T> for AttentionGateState<T> {
    /// (N, C0, D1, D2) -> weights (N, 1, D1, D2) in (0, 1).
    fn forward(&self, ctx: &mut Context<T>, t: Var) -> Result<Var> {
        let pooled = ctx.tape.zpool(t)?;
        let conv = self.conv.forward(ctx, pooled)?;
        let normed = self.bn.forward(ctx, conv)?;
        ctx.tape.sigmoid(normed)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}
