use crate::error::{Error, Result};
use crate::module::{BatchStats, Context, Module, ParamKind};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Fill, Shape, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization. Affine parameters and running
/// statistics are stored as (1, C, 1, 1) tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2dState<T> {
    pub name: String,
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
    pub running_mean: Tensor4<T>,
    pub running_var: Tensor4<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm2dState<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        let ones = Tensor4::new(s, Fill::Constant(T::one())).expect("valid shape");
        BatchNorm2dState {
            name: name.into(),
            gamma: ones.clone().with_requires_grad(true),
            beta: Tensor4::zeros(s).with_requires_grad(true),
            running_mean: Tensor4::zeros(s),
            running_var: ones,
            eps: T::lit(DEFAULT_EPS),
            momentum: T::lit(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c()
    }
}

impl<T: Scalar> Module<T> for BatchNorm2dState<T> {
    /// Train mode normalizes with batch statistics and reports them to the
    /// context; eval mode applies the running-statistics affine map.
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).c();
        if c != self.channels() {
            return Err(Error::Dimension(format!(
                "batchnorm `{}` has {} channels, input has {c}",
                self.name,
                self.channels()
            )));
        }
        let gamma = ctx.param(&format!("{}.gamma", self.name), &self.gamma);
        let beta = ctx.param(&format!("{}.beta", self.name), &self.beta);
        if ctx.is_train() {
            let (y, mean, var) = ctx.tape.batchnorm_train(x, gamma, beta, self.eps)?;
            let m = T::from_usize_lossy(ctx.tape.shape(x).numel() / c);
            let var_unbiased = var.iter().map(|&v| v * m / (m - T::one())).collect();
            ctx.record_batch_stats(&self.name, BatchStats { mean, var_unbiased, momentum: self.momentum });
            Ok(y)
        } else {
            ctx.tape.batchnorm_eval(x, gamma, beta, self.running_mean.data(), self.running_var.data(), self.eps)
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        f(&format!("{}.gamma", self.name), ParamKind::BnAffine, &self.gamma);
        f(&format!("{}.beta", self.name), ParamKind::BnAffine, &self.beta);
        f(&format!("{}.running_mean", self.name), ParamKind::RunningStat, &self.running_mean);
        f(&format!("{}.running_var", self.name), ParamKind::RunningStat, &self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        f(&format!("{}.gamma", self.name), ParamKind::BnAffine, &mut self.gamma);
        f(&format!("{}.beta", self.name), ParamKind::BnAffine, &mut self.beta);
        f(&format!("{}.running_mean", self.name), ParamKind::RunningStat, &mut self.running_mean);
        f(&format!("{}.running_var", self.name), ParamKind::RunningStat, &mut self.running_var);
    }
}

impl<T: Scalar> Tape<T> {
    /// Normalizes over (N, H, W) with biased batch variance. Returns the
    /// output together with the batch mean and biased variance.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        self.owned(&[x, gamma, beta])?;
        let s = self.shape(x);
        check_affine(self, s, gamma, beta)?;
        let [n, c, h, w] = s.0;
        let m = n * h * w;
        if m <= 1 {
            return Err(Error::DegenerateBatch(m));
        }
        let xv = self.value(x);
        let hw = h * w;
        let mf = T::from_usize_lossy(m);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                let o = s.offset(ni, ci, 0, 0);
                acc = acc + xv[o..o + hw].iter().copied().sum();
            }
            mean[ci] = acc / mf;
            let mut sq = T::zero();
            for ni in 0..n {
                let o = s.offset(ni, ci, 0, 0);
                sq = sq + xv[o..o + hw].iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum();
            }
            var[ci] = sq / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = normalize(self, x, gamma, beta, &mean, &inv_std);
        let rg = self.any_grad(&[x, gamma, beta]);
        let y = self.push(s, out, rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true });
        Ok((y, mean, var))
    }

    /// Per-channel affine map `γ·(x − μ)/√(σ² + eps) + β` with fixed statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        self.owned(&[x, gamma, beta])?;
        let s = self.shape(x);
        check_affine(self, s, gamma, beta)?;
        if mean.len() != s.c() || var.len() != s.c() {
            return Err(Error::Dimension("running statistics length mismatch".into()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = normalize(self, x, gamma, beta, mean, &inv_std);
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(s, out, rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false }))
    }
}

fn check_affine<T: Scalar>(tape: &Tape<T>, s: Shape, gamma: Var, beta: Var) -> Result<()> {
    let want = Shape::new(1, s.c(), 1, 1);
    if tape.shape(gamma) != want || tape.shape(beta) != want {
        return Err(Error::Dimension(format!(
            "batchnorm affine shapes {} / {} for input {s}",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    Ok(())
}

fn normalize<T: Scalar>(tape: &Tape<T>, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
    let s = tape.shape(x);
    let [n, c, h, w] = s.0;
    let hw = h * w;
    let (xv, gv, bv) = (tape.value(x), tape.value(gamma), tape.value(beta));
    let mut xhat = vec![T::zero(); xv.len()];
    let mut out = vec![T::zero(); xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let o = s.offset(ni, ci, 0, 0);
            for i in o..o + hw {
                xhat[i] = (xv[i] - mean[ci]) * inv_std[ci];
                out[i] = gv[ci] * xhat[i] + bv[ci];
            }
        }
    }
    (xhat, out)
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    g: &[T],
    s: Shape,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = s.0;
    let hw = h * w;
    let m = T::from_usize_lossy(n * hw);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let o = s.offset(ni, ci, 0, 0);
            for i in o..o + hw {
                dgamma[ci] = dgamma[ci] + g[i] * xhat[i];
                dbeta[ci] = dbeta[ci] + g[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for ni in 0..n {
        for ci in 0..c {
            let o = s.offset(ni, ci, 0, 0);
            let k = gamma[ci] * inv_std[ci];
            for i in o..o + hw {
                dx[i] = if train {
                    // dxhat = g·γ; Σdxhat = γ·dβ; Σ(dxhat·xhat) = γ·dγ
                    k * (g[i] - (dbeta[ci] + xhat[i] * dgamma[ci]) / m)
                } else {
                    k * g[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::Mode;

    fn run(bn: &BatchNorm2dState<f64>, mode: Mode, x: Tensor4<f64>) -> (Tensor4<f64>, Context<f64>) {
        let mut ctx = Context::new(mode);
        let xv = ctx.tape.constant(x);
        let y = bn.forward(&mut ctx, xv).unwrap();
        (ctx.tape.tensor(y), ctx)
    }

    #[test]
    fn standardized_input_passes_through() {
        // per channel: values {-1, 1} repeated, mean 0 variance 1
        let x = Tensor4::from_fn(Shape::new(2, 2, 2, 2), |n, _, h, w| if (n + h + w) % 2 == 0 { 1.0 } else { -1.0 });
        let bn = BatchNorm2dState::new("bn", 2);
        let (y, _) = run(&bn, Mode::Train, x.clone());
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_affine() {
        let mut bn = BatchNorm2dState::<f64>::new("bn", 1);
        bn.gamma.data_mut()[0] = 2.0;
        bn.beta.data_mut()[0] = 1.0;
        let x = Tensor4::new(Shape::new(1, 1, 1, 1), Fill::Constant(3.0)).unwrap();
        let (y, _) = run(&bn, Mode::Eval, x);
        assert_eq!(y.data()[0], 1.0 + 2.0 * 3.0 / (1.0f64 + 1e-5).sqrt());
        assert!((y.data()[0] - 7.0).abs() < 1e-4);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut bn = BatchNorm2dState::<f64>::new("bn", 3);
        bn.gamma.data_mut().iter_mut().for_each(|v| *v = 0.0);
        bn.beta.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let x = Tensor4::uniform(Shape::new(2, 3, 3, 3), -2.0, 2.0, 9).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = run(&bn, mode, x.clone());
            for c in 0..3 {
                assert_eq!(y.at(1, c, 2, 1), bn.beta.data()[c]);
            }
        }
    }

    #[test]
    fn degenerate_batch() {
        let bn = BatchNorm2dState::<f64>::new("bn", 2);
        let mut ctx = Context::new(Mode::Train);
        let xv = ctx.tape.constant(Tensor4::zeros(Shape::new(1, 2, 1, 1)));
        assert!(matches!(bn.forward(&mut ctx, xv), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn train_output_is_standardized_and_stats_update() {
        // spread chosen so that the eps term moves the variance by < 1e-6
        let x = Tensor4::uniform(Shape::new(3, 2, 4, 5), -30.0, 70.0, 11).unwrap();
        let mut bn = BatchNorm2dState::new("bn", 2);
        let (y, ctx) = run(&bn, Mode::Train, x.clone());
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).flat_map(move |h| (0..5).map(move |w| (n, h, w))))
                .map(|(n, h, w)| y.at(n, c, h, w))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let stats = ctx.batch_stats().clone();
        bn.commit_batch_stats(&stats);
        let s = &stats["bn"];
        assert!((bn.running_mean.data()[0] - 0.1 * s.mean[0]).abs() < 1e-15);
        assert!((bn.running_var.data()[1] - (0.9 + 0.1 * s.var_unbiased[1])).abs() < 1e-15);
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }
}
