//! Global pooling, Z-pool and windowed max pooling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Shape;

impl<T: Scalar> Tape<T> {
    /// Global average pooling: (N,C,H,W) -> (N,C,1,1).
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        self.owned(&[a])?;
        let s = self.shape(a);
        let hw = s.h() * s.w();
        let inv = T::one() / T::from_usize_lossy(hw);
        let out = self
            .value(a)
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Shape::new(s.n(), s.c(), 1, 1), out, rg, Op::Gap { a }))
    }

    /// Global max pooling: (N,C,H,W) -> (N,C,1,1). The gradient goes to the
    /// first maximum in row-major order.
    pub fn gmp(&mut self, a: Var) -> Result<Var> {
        self.owned(&[a])?;
        let s = self.shape(a);
        let hw = s.h() * s.w();
        let mut out = Vec::with_capacity(s.n() * s.c());
        let mut argmax = Vec::with_capacity(s.n() * s.c());
        for (p, plane) in self.value(a).chunks_exact(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(p * hw + best);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Shape::new(s.n(), s.c(), 1, 1), out, rg, Op::Gmp { a, argmax }))
    }

    /// Z-pool: reduces axis 1 to two channels, `[max, mean]` per position.
    pub fn zpool(&mut self, a: Var) -> Result<Var> {
        self.owned(&[a])?;
        let s = self.shape(a);
        let [n, c, h, w] = s.0;
        let hw = h * w;
        let os = Shape::new(n, 2, h, w);
        let xv = self.value(a);
        let count = T::from_usize_lossy(c);
        let mut out = vec![T::zero(); os.numel()];
        let mut argmax = vec![0usize; n * hw];
        for ni in 0..n {
            let base = s.offset(ni, 0, 0, 0);
            let obase = os.offset(ni, 0, 0, 0);
            for p in 0..hw {
                let mut best = base + p;
                let mut acc = T::zero();
                for ci in 0..c {
                    let i = base + ci * hw + p;
                    if xv[i] > xv[best] {
                        best = i;
                    }
                    acc = acc + xv[i];
                }
                out[obase + p] = xv[best];
                out[obase + hw + p] = acc / count;
                argmax[ni * hw + p] = best;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(os, out, rg, Op::ZPool { a, argmax }))
    }

    /// Windowed max pooling with implicit −∞ padding.
    pub fn maxpool2d(&mut self, a: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        self.owned(&[a])?;
        let s = self.shape(a);
        let [n, c, h, w] = s.0;
        if padding > k / 2 {
            return Err(Error::Config(format!("maxpool padding {padding} too large for kernel {k}")));
        }
        let (oh, ow) = match (
            super::conv::conv_out_len(h, k, stride, padding),
            super::conv::conv_out_len(w, k, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Dimension(format!("maxpool {k}x{k} does not fit {s}"))),
        };
        let os = Shape::new(n, c, oh, ow);
        let xv = self.value(a);
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best: Option<usize> = None;
                        for ki in 0..k {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = s.offset(ni, ci, iy as usize, ix as usize);
                                if best.is_none_or(|b| xv[i] > xv[b]) {
                                    best = Some(i);
                                }
                            }
                        }
                        let b = best.expect("every window overlaps the input");
                        out.push(xv[b]);
                        argmax.push(b);
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(os, out, rg, Op::MaxPool2d { a, argmax }))
    }
}

pub(crate) fn zpool_backward<T: Scalar>(g: &[T], in_shape: Shape, argmax: &[usize]) -> Vec<T> {
    let [n, c, h, w] = in_shape.0;
    let hw = h * w;
    let inv = T::one() / T::from_usize_lossy(c);
    let mut dx = vec![T::zero(); in_shape.numel()];
    for ni in 0..n {
        let base = in_shape.offset(ni, 0, 0, 0);
        let gbase = ni * 2 * hw;
        for p in 0..hw {
            let gm = g[gbase + hw + p] * inv;
            for ci in 0..c {
                let i = base + ci * hw + p;
                dx[i] = dx[i] + gm;
            }
            let am = argmax[ni * hw + p];
            dx[am] = dx[am] + g[gbase + p];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, Tensor4};

    fn vals(shape: Shape, v: Vec<f64>) -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor4::from_vec(shape, v).unwrap());
        (tape, x)
    }

    #[test]
    fn gap_and_gmp_small() {
        let (mut tape, x) = vals(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let a = tape.gap(x).unwrap();
        let m = tape.gmp(x).unwrap();
        assert_eq!(tape.value(a), &[2.5]);
        assert_eq!(tape.value(m), &[4.0]);
        let aa = tape.gap(a).unwrap();
        assert_eq!(tape.value(aa), tape.value(a));
    }

    #[test]
    fn constant_pools() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::new(Shape::new(2, 3, 4, 5), Fill::Constant(1.25)).unwrap());
        for v in [tape.gap(x).unwrap(), tape.gmp(x).unwrap(), tape.zpool(x).unwrap()] {
            assert!(tape.value(v).iter().all(|&e| e == 1.25));
        }
    }

    #[test]
    fn gmp_tie_routes_to_first() {
        let (mut tape, x) = vals(Shape::new(1, 1, 2, 2), vec![4.0, 1.0, 4.0, 0.0]);
        let m = tape.gmp(x).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zpool_over_channels() {
        let (mut tape, x) = vals(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]);
        let z = tape.zpool(x).unwrap();
        assert_eq!(tape.shape(z), Shape::new(1, 2, 1, 1));
        assert_eq!(tape.value(z), &[4.0, 2.5]);
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25, 0.25, 0.25, 1.25]);
    }

    #[test]
    fn zpool_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::zeros(Shape::new(1, 64, 32, 32)));
        let z = tape.zpool(x).unwrap();
        assert_eq!(tape.shape(z), Shape::new(1, 2, 32, 32));
    }

    #[test]
    fn maxpool_stem_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::uniform(Shape::new(1, 2, 8, 8), -1.0, 1.0, 1).unwrap());
        let p = tape.maxpool2d(x, 3, 2, 1).unwrap();
        assert_eq!(tape.shape(p), Shape::new(1, 2, 4, 4));
        let xt = tape.tensor(x);
        // window for output (0,0) covers rows/cols 0..=1
        let want = [xt.at(0, 0, 0, 0), xt.at(0, 0, 0, 1), xt.at(0, 0, 1, 0), xt.at(0, 0, 1, 1)]
            .into_iter()
            .fold(f64::MIN, f64::max);
        assert_eq!(tape.value(p)[0], want);
    }
}
