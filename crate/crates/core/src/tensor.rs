//! Dense rank-4 tensors in (N, C, H, W) layout.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extent of a rank-4 tensor, ordered (N, C, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.0 == [1, 1, 1, 1]
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }

    /// `other` broadcasts to `self` when each of its axes equals ours or is 1.
    pub fn accepts_broadcast(&self, other: &Shape) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .all(|(&a, &b)| a == b || b == 1)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("shape {self} has a zero extent")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

/// How to populate a freshly created tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Fill<T> {
    Zeros,
    Constant(T),
    /// Uniform on `[low, high)` from a ChaCha8 stream seeded with `seed`.
    Uniform { low: f64, high: f64, seed: u64 },
    Values(Vec<T>),
}

/// Permutation of the three non-batch axes.
///
/// `Perm([a, b, c])` places input axis `a` at output axis 1, `b` at 2 and `c`
/// at 3, where axes are numbered 1 = C, 2 = H, 3 = W.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Perm(pub [usize; 3]);

impl Perm {
    pub const IDENTITY: Perm = Perm([1, 2, 3]);
    /// (N,C,H,W) -> (N,W,H,C)
    pub const SWAP_CW: Perm = Perm([3, 2, 1]);
    /// (N,C,H,W) -> (N,H,C,W)
    pub const SWAP_CH: Perm = Perm([2, 1, 3]);

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &a in &self.0 {
            if !(1..=3).contains(&a) || seen[a - 1] {
                return Err(Error::Contract(format!(
                    "{:?} is not a permutation of axes 1..3",
                    self.0
                )));
            }
            seen[a - 1] = true;
        }
        Ok(())
    }

    pub fn inverse(&self) -> Perm {
        let mut inv = [0; 3];
        for (out_axis, &in_axis) in self.0.iter().enumerate() {
            inv[in_axis - 1] = out_axis + 1;
        }
        Perm(inv)
    }

    pub fn apply_shape(&self, s: Shape) -> Shape {
        Shape([s.0[0], s.0[self.0[0]], s.0[self.0[1]], s.0[self.0[2]]])
    }
}

/// A dense (N, C, H, W) array of scalars with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: Shape, fill: Fill<T>) -> Result<Self> {
        shape.validate()?;
        let len = shape.numel();
        let data = match fill {
            Fill::Zeros => vec![T::zero(); len],
            Fill::Constant(c) => vec![c; len],
            Fill::Uniform { low, high, seed } => {
                if !(low < high) {
                    return Err(Error::Contract(format!(
                        "uniform fill needs low < high, got [{low}, {high})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| T::lit(rng.random_range(low..high))).collect()
            }
            Fill::Values(v) => {
                if v.len() != len {
                    return Err(Error::Dimension(format!(
                        "{} values supplied for shape {shape} ({len} elements)",
                        v.len()
                    )));
                }
                v
            }
        };
        Ok(Tensor4 { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, Fill::Zeros).expect("valid shape")
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        Self::new(shape, Fill::Values(data))
    }

    pub fn uniform(shape: Shape, low: f64, high: f64, seed: u64) -> Result<Self> {
        Self::new(shape, Fill::Uniform { low, high, seed })
    }

    /// Builds a tensor from a closure over (n, c, h, w).
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [nn, cc, hh, ww] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..nn {
            for c in 0..cc {
                for h in 0..hh {
                    for w in 0..ww {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4 { shape, data, grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {}",
                g.len(),
                self.shape
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b = *b + v;
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.shape.offset(n, c, h, w);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Materialized axis permutation.
    pub fn permute(&self, perm: Perm) -> Result<Self> {
        perm.validate()?;
        Ok(Tensor4 {
            shape: perm.apply_shape(self.shape),
            data: permute_data(&self.data, self.shape, perm),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Stacks batch-of-N tensors along the batch axis.
    pub fn concat_batch(parts: &[Tensor4<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.0[1..] != [c, h, w] {
                return Err(Error::Dimension(format!(
                    "cannot stack {} onto {}",
                    p.shape, first.shape
                )));
            }
            n += p.shape.n();
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(Shape::new(n, c, h, w), data)
    }

    /// Copies out batch element `n` as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.strides()[0];
        let [_, c, h, w] = self.shape.0;
        Tensor4 {
            shape: Shape::new(1, c, h, w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }
}

/// Gathers `data` (laid out as `shape`) into the permuted layout.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: Shape, perm: Perm) -> Vec<T> {
    let out_shape = perm.apply_shape(shape);
    let in_strides = shape.strides();
    // stride in the input for a unit step along each output axis
    let step = [
        in_strides[0],
        in_strides[perm.0[0]],
        in_strides[perm.0[1]],
        in_strides[perm.0[2]],
    ];
    let [n, a, b, c] = out_shape.0;
    let mut out = Vec::with_capacity(data.len());
    for i0 in 0..n {
        for i1 in 0..a {
            for i2 in 0..b {
                let base = i0 * step[0] + i1 * step[1] + i2 * step[2];
                for i3 in 0..c {
                    out.push(data[base + i3 * step[3]]);
                }
            }
        }
    }
    out
}

/// Reverses axis `axis` (1..=3) in place-copy.
pub(crate) fn flip_data<T: Copy>(data: &[T], shape: Shape, axis: usize) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let mut out = Vec::with_capacity(data.len());
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                for i3 in 0..w {
                    let mut idx = [i0, i1, i2, i3];
                    idx[axis] = shape.0[axis] - 1 - idx[axis];
                    out.push(data[shape.offset(idx[0], idx[1], idx[2], idx[3])]);
                }
            }
        }
    }
    out
}
