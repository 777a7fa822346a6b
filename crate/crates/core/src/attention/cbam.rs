use super::gate::AttentionGateState;
use crate::error::Result;
use crate::module::{Context, Module, ParamKind};
use crate::nn::Mlp2State;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor4;

/// Channel attention from a shared MLP over GAP and GMP descriptors,
/// followed by a spatial gate.
#[derive(Clone, Debug, PartialEq)]
pub struct CbamState<T> {
    pub name: String,
    pub mlp: Mlp2State<T>,
    pub spatial: AttentionGateState<T>,
}

impl<T: Scalar> CbamState<T> {
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize, k: usize, seed: u64) -> Result<Self> {
        let name = name.into();
        Ok(CbamState {
            mlp: Mlp2State::new(format!("{name}.mlp"), channels, reduction, seed)?,
            spatial: AttentionGateState::new(format!("{name}.spatial"), k, seed.wrapping_add(7))?,
            name,
        })
    }

    /// `σ(mlp(gap(x)) + mlp(gmp(x)))`, shape (N, C, 1, 1).
    pub fn channel_weights(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        let avg = ctx.tape.gap(x)?;
        let max = ctx.tape.gmp(x)?;
        let a = self.mlp.forward(ctx, avg)?;
        let m = self.mlp.forward(ctx, max)?;
        let s = ctx.tape.add(a, m)?;
        ctx.tape.sigmoid(s)
    }
}

impl<T: Scalar> Module<T> for CbamState<T> {
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        let cw = self.channel_weights(ctx, x)?;
        let refined = ctx.tape.broadcast_mul(x, cw)?;
        let sw = self.spatial.forward(ctx, refined)?;
        ctx.tape.broadcast_mul(refined, sw)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        self.mlp.visit(f);
        self.spatial.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        self.mlp.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}
