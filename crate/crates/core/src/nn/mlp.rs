use crate::error::{Error, Result};
use crate::module::{Context, Module, ParamKind};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{Shape, Tensor4};

/// Bias-free bottleneck MLP `W1 · relu(W0 · v)` applied to (N, C, 1, 1) descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2State<T> {
    pub name: String,
    /// (C/r, C, 1, 1)
    pub w0: Tensor4<T>,
    /// (C, C/r, 1, 1)
    pub w1: Tensor4<T>,
    pub reduction: usize,
}

impl<T: Scalar> Mlp2State<T> {
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels == 0 {
            return Err(Error::Config(format!(
                "reduction ratio {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        let b0 = (1.0 / channels as f64).sqrt();
        let b1 = (1.0 / hidden as f64).sqrt();
        Ok(Mlp2State {
            name: name.into(),
            w0: Tensor4::uniform(Shape::new(hidden, channels, 1, 1), -b0, b0, seed)?.with_requires_grad(true),
            w1: Tensor4::uniform(Shape::new(channels, hidden, 1, 1), -b1, b1, seed.wrapping_add(1))?
                .with_requires_grad(true),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w0.shape().c()
    }

    pub fn hidden(&self) -> usize {
        self.w0.shape().n()
    }
}

impl<T: Scalar> Module<T> for Mlp2State<T> {
    fn forward(&self, ctx: &mut Context<T>, v: Var) -> Result<Var> {
        let s = ctx.tape.shape(v);
        if s.c() != self.channels() || s.h() != 1 || s.w() != 1 {
            return Err(Error::Dimension(format!(
                "mlp `{}` expects (N,{},1,1), got {s}",
                self.name,
                self.channels()
            )));
        }
        let w0 = ctx.param(&format!("{}.w0", self.name), &self.w0);
        let w1 = ctx.param(&format!("{}.w1", self.name), &self.w1);
        let hidden = ctx.tape.conv2d(v, w0, None, 1, 0)?;
        let hidden = ctx.tape.relu(hidden)?;
        ctx.tape.conv2d(hidden, w1, None, 1, 0)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        f(&format!("{}.w0", self.name), ParamKind::MlpWeight, &self.w0);
        f(&format!("{}.w1", self.name), ParamKind::MlpWeight, &self.w1);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        f(&format!("{}.w0", self.name), ParamKind::MlpWeight, &mut self.w0);
        f(&format!("{}.w1", self.name), ParamKind::MlpWeight, &mut self.w1);
    }
}
