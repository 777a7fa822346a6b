use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Shape;

/// Row-wise softmax of `logits` laid out as N rows of `k` values.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Mean softmax cross-entropy of logits (N, K, 1, 1) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.owned(&[logits])?;
        let s = self.shape(logits);
        let k = s.c();
        if s.h() != 1 || s.w() != 1 || labels.len() != s.n() {
            return Err(Error::Dimension(format!(
                "cross_entropy expects (N,K,1,1) logits with N labels, got {s} and {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits);
        let probs = softmax_rows(lv, k);
        let mut total = T::zero();
        for (n, &label) in labels.iter().enumerate() {
            let row = &lv[n * k..(n + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total = total + lse - row[label];
        }
        let loss = total / T::from_usize_lossy(s.n());
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Shape::scalar(),
            vec![loss],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::<f64>::new();
        let l = tape.variable(Tensor4::zeros(Shape::new(2, 4, 1, 1)));
        let loss = tape.cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.value(loss)[0] - 4.0f64.ln()).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        let gl = g.get(l).unwrap();
        assert!((gl[0] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((gl[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn bad_labels() {
        let mut tape = Tape::<f64>::new();
        let l = tape.variable(Tensor4::zeros(Shape::new(1, 2, 1, 1)));
        assert!(tape.cross_entropy(l, &[2]).is_err());
        assert!(tape.cross_entropy(l, &[0, 1]).is_err());
    }
}
