use crate::error::Result;
use crate::module::{Context, Module, ParamKind};
use crate::nn::Mlp2State;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor4;

/// Squeeze-and-excitation: `x ⊙ σ(mlp(gap(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeState<T> {
    pub name: String,
    pub mlp: Mlp2State<T>,
}

impl<T: Scalar> SeState<T> {
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        let name = name.into();
        Ok(SeState { mlp: Mlp2State::new(format!("{name}.mlp"), channels, reduction, seed)?, name })
    }
}

impl<T: Scalar> Module<T> for SeState<T> {
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        let squeezed = ctx.tape.gap(x)?;
        let excited = self.mlp.forward(ctx, squeezed)?;
        let w = ctx.tape.sigmoid(excited)?;
        ctx.tape.broadcast_mul(x, w)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        self.mlp.visit_mut(f);
    }
}
