//! 2-D cross-correlation with zero padding.

use crate::error::{Error, Result};
use crate::module::{Context, Module, ParamKind};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Shape, Tensor4};

/// Output extent of a convolution along one spatial axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dState<T> {
    pub name: String,
    /// (C_out, C_in, k, k)
    pub weight: Tensor4<T>,
    /// (1, C_out, 1, 1)
    pub bias: Option<Tensor4<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dState<T> {
    /// Fan-in uniform init in ±√(1/(C_in·k²)).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::Config(format!("conv kernel {k} / stride {stride} must be positive")));
        }
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        let weight = Tensor4::uniform(Shape::new(c_out, c_in, k, k), -bound, bound, seed)?
            .with_requires_grad(true);
        let bias = if bias {
            Some(
                Tensor4::uniform(Shape::new(1, c_out, 1, 1), -bound, bound, seed ^ 0x9e37_79b9)?
                    .with_requires_grad(true),
            )
        } else {
            None
        };
        Ok(Conv2dState { name: name.into(), weight, bias, stride, padding })
    }

    /// Stride 1, padding (k−1)/2, no bias; requires odd `k`.
    pub fn shape_preserving(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, seed: u64) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("shape-preserving conv needs odd k, got {k}")));
        }
        Self::new(name, c_in, c_out, k, 1, (k - 1) / 2, false, seed)
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c()
    }
    pub fn c_out(&self) -> usize {
        self.weight.shape().n()
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape().h()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        Some((
            conv_out_len(h, k, self.stride, self.padding)?,
            conv_out_len(w, k, self.stride, self.padding)?,
        ))
    }
}

impl<T: Scalar> Module<T> for Conv2dState<T> {
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name), &self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(&format!("{}.bias", self.name), b));
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        f(&format!("{}.weight", self.name), ParamKind::ConvWeight, &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), ParamKind::Bias, b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        f(&format!("{}.weight", self.name), ParamKind::ConvWeight, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), ParamKind::Bias, b);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x` (N,C_in,H,W) with `weight` (C_out,C_in,k,k).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let mut vars = vec![x, weight];
        vars.extend(bias);
        self.owned(&vars)?;
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let [n, c_in, h, w] = xs.0;
        let [c_out, wc_in, kh, kw] = ws.0;
        if wc_in != c_in {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c_in} channels, weight {ws} expects {wc_in}"
            )));
        }
        if kh != kw {
            return Err(Error::Dimension(format!("conv2d: non-square kernel {ws}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != Shape::new(1, c_out, 1, 1) {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {} for {c_out} output channels",
                    self.shape(b)
                )));
            }
        }
        let (oh, ow) = match (conv_out_len(h, kh, stride, padding), conv_out_len(w, kw, stride, padding)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d: kernel {kh} with padding {padding} does not fit input {xs}"
                )))
            }
        };
        let os = Shape::new(n, c_out, oh, ow);
        let xv = self.value(x);
        let wv = self.value(weight);
        let mut out = vec![T::zero(); os.numel()];
        if let Some(b) = bias {
            let bv = self.value(b);
            for ni in 0..n {
                for co in 0..c_out {
                    let o = os.offset(ni, co, 0, 0);
                    out[o..o + oh * ow].iter_mut().for_each(|v| *v = bv[co]);
                }
            }
        }
        for ni in 0..n {
            for co in 0..c_out {
                let obase = os.offset(ni, co, 0, 0);
                for ci in 0..c_in {
                    let xbase = xs.offset(ni, ci, 0, 0);
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wgt = wv[ws.offset(co, ci, ki, kj)];
                            for oy in 0..oh {
                                let iy = (oy * stride + ki) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                let orow = obase + oy * ow;
                                for ox in 0..ow {
                                    let ix = (ox * stride + kj) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out[orow + ox] = out[orow + ox] + wgt * xv[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&vars);
        Ok(self.push(os, out, rg, Op::Conv2d { x, weight, bias, stride, padding }))
    }
}

/// Returns (dx, dweight, dbias) for the requested operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    xv: &[T],
    xs: Shape,
    wv: &[T],
    ws: Shape,
    g: &[T],
    os: Shape,
    stride: usize,
    padding: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let [n, c_in, h, w] = xs.0;
    let [c_out, _, kh, kw] = ws.0;
    let [_, _, oh, ow] = os.0;
    let mut dx = if want_dx { Some(vec![T::zero(); xv.len()]) } else { None };
    let mut dw = if want_dw { Some(vec![T::zero(); wv.len()]) } else { None };
    let mut db = vec![T::zero(); c_out];
    for ni in 0..n {
        for co in 0..c_out {
            let gbase = os.offset(ni, co, 0, 0);
            db[co] = db[co] + g[gbase..gbase + oh * ow].iter().copied().sum();
            for ci in 0..c_in {
                let xbase = xs.offset(ni, ci, 0, 0);
                for ki in 0..kh {
                    for kj in 0..kw {
                        let widx = ws.offset(co, ci, ki, kj);
                        let wgt = wv[widx];
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let grow = gbase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let gv = g[grow + ox];
                                let xi = xrow + ix as usize;
                                acc = acc + gv * xv[xi];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] = dx[xi] + gv * wgt;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::Mode;
    use crate::tensor::Fill;

    fn conv_with(weight: Tensor4<f64>, padding: usize) -> Conv2dState<f64> {
        Conv2dState { name: "c".into(), weight, bias: None, stride: 1, padding }
    }

    #[test]
    fn identity_kernel() {
        let conv = conv_with(Tensor4::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap(), 0);
        let x = Tensor4::<f64>::uniform(Shape::new(1, 1, 3, 4), -1.0, 1.0, 5).unwrap();
        let mut ctx = Context::new(Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let y = conv.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.value(y), x.data());
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        // direct convolution-sum oracle: each output is 5 times the count of
        // in-bounds taps in its 3x3 window
        let conv = conv_with(Tensor4::new(Shape::new(1, 1, 3, 3), Fill::Constant(1.0)).unwrap(), 1);
        let x = Tensor4::new(Shape::new(1, 1, 4, 4), Fill::Constant(5.0)).unwrap();
        let mut ctx = Context::new(Mode::Eval);
        let xv = ctx.tape.constant(x);
        let y = conv.forward(&mut ctx, xv).unwrap();
        let y = ctx.tape.tensor(y);
        for oy in 0..4 {
            for ox in 0..4 {
                let rows = (oy as i32 - 1..=oy as i32 + 1).filter(|r| (0..4).contains(r)).count();
                let cols = (ox as i32 - 1..=ox as i32 + 1).filter(|c| (0..4).contains(c)).count();
                assert_eq!(y.at(0, 0, oy, ox), 5.0 * (rows * cols) as f64);
            }
        }
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        assert_eq!(y.at(0, 0, 0, 0), 20.0);
    }

    #[test]
    fn zero_weight_zero_output() {
        let mut conv = Conv2dState::<f64>::new("c", 2, 3, 3, 1, 1, true, 1).unwrap();
        conv.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        conv.bias.as_mut().unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut ctx = Context::new(Mode::Eval);
        let xv = ctx.tape.constant(Tensor4::uniform(Shape::new(2, 2, 4, 4), -1.0, 1.0, 2).unwrap());
        let y = conv.forward(&mut ctx, xv).unwrap();
        assert!(ctx.tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch() {
        let conv = Conv2dState::<f64>::new("c", 3, 1, 3, 1, 1, false, 1).unwrap();
        let mut ctx = Context::new(Mode::Eval);
        let xv = ctx.tape.constant(Tensor4::zeros(Shape::new(1, 2, 4, 4)));
        assert!(matches!(conv.forward(&mut ctx, xv), Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_preserving_and_stride() {
        for k in [1, 3, 5, 7] {
            let conv = Conv2dState::<f64>::shape_preserving("c", 2, 1, k, 3).unwrap();
            assert_eq!(conv.out_hw(9, 6), Some((9, 6)));
        }
        assert!(Conv2dState::<f64>::shape_preserving("c", 2, 1, 4, 3).is_err());
        let s2 = Conv2dState::<f64>::new("c", 2, 1, 3, 2, 1, false, 3).unwrap();
        assert_eq!(s2.out_hw(7, 8), Some((4, 4)));
        let bound = (1.0f64 / (2.0 * 9.0)).sqrt();
        assert!(s2.weight.data().iter().all(|v| v.abs() <= bound));
    }
}
