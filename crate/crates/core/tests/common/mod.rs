#![allow(dead_code)]

use triplet_core::attention::{AttentionGateState, TripletAttentionState};
use triplet_core::{Context, Mode, Module, ParamKind, Shape, Tensor};

pub fn run(m: &dyn Module<f64>, x: &Tensor, mode: Mode) -> Tensor {
    let mut ctx = Context::new(mode).without_param_grads();
    let v = ctx.tape.constant(x.clone());
    let y = m.forward(&mut ctx, v).unwrap();
    ctx.tape.tensor(y)
}

/// Gives every registry entry a seeded non-trivial value (positive running variances).
pub fn randomize(m: &mut dyn Module<f64>, seed: u64) {
    let mut k = 0;
    m.visit_mut(&mut |name, kind, t| {
        k += 1;
        let (lo, hi) = match kind {
            ParamKind::RunningStat if name.ends_with("running_var") => (0.5, 2.0),
            ParamKind::BnAffine if name.ends_with("gamma") => (0.5, 1.5),
            _ => (-0.5, 0.5),
        };
        let r = Tensor::uniform(t.shape(), lo, hi, seed * 1000 + k).unwrap();
        t.data_mut().copy_from_slice(r.data());
    });
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Eval-mode gate on a single (2, rows, cols) pooled map: k×k zero-padded
/// cross-correlation, batchnorm affine with running statistics, sigmoid.
fn gate_map(g: &AttentionGateState<f64>, pooled: &[[f64; 2]], rows: usize, cols: usize) -> Vec<f64> {
    let k = g.conv.weight.shape().h();
    let p = (k - 1) / 2;
    let w = g.conv.weight.data();
    let bn = &g.bn;
    let (gamma, beta) = (bn.gamma.data()[0], bn.beta.data()[0]);
    let (mean, var) = (bn.running_mean.data()[0], bn.running_var.data()[0]);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for ch in 0..2 {
                for di in 0..k {
                    for dj in 0..k {
                        let (ii, jj) = (i as isize + di as isize - p as isize, j as isize + dj as isize - p as isize);
                        if ii < 0 || jj < 0 || ii >= rows as isize || jj >= cols as isize {
                            continue;
                        }
                        acc += w[(ch * k + di) * k + dj] * pooled[ii as usize * cols + jj as usize][ch];
                    }
                }
            }
            let z = gamma * (acc - mean) / (var + bn.eps).sqrt() + beta;
            out[i * cols + j] = sigmoid(z);
        }
    }
    out
}

fn max_mean(vals: impl Iterator<Item = f64>) -> [f64; 2] {
    let v: Vec<f64> = vals.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [max, v.iter().sum::<f64>() / v.len() as f64]
}

/// Triplet attention written as explicit loops, eval mode, no flip.
pub fn triplet_oracle(t: &TripletAttentionState<f64>, x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let mut y = Tensor::zeros(Shape::new(n, c, h, w));
    let mut branches = 0.0;
    for b in 0..n {
        // branch 1: C and W swap places; pool over W, gate over (H, C)
        if let Some(g) = &t.gate_cw {
            let pooled: Vec<[f64; 2]> = (0..h)
                .flat_map(|i| (0..c).map(move |ch| (i, ch)))
                .map(|(i, ch)| max_mean((0..w).map(|j| x.at(b, ch, i, j))))
                .collect();
            let a = gate_map(g, &pooled, h, c);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = y.at(b, ch, i, j) + x.at(b, ch, i, j) * a[i * c + ch];
                        y.set(b, ch, i, j, v);
                    }
                }
            }
        }
        // branch 2: C and H swap places; pool over H, gate over (C, W)
        if let Some(g) = &t.gate_ch {
            let pooled: Vec<[f64; 2]> = (0..c)
                .flat_map(|ch| (0..w).map(move |j| (ch, j)))
                .map(|(ch, j)| max_mean((0..h).map(|i| x.at(b, ch, i, j))))
                .collect();
            let a = gate_map(g, &pooled, c, w);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = y.at(b, ch, i, j) + x.at(b, ch, i, j) * a[ch * w + j];
                        y.set(b, ch, i, j, v);
                    }
                }
            }
        }
        // branch 3: pool over C, gate over (H, W)
        if let Some(g) = &t.gate_hw {
            let pooled: Vec<[f64; 2]> = (0..h)
                .flat_map(|i| (0..w).map(move |j| (i, j)))
                .map(|(i, j)| max_mean((0..c).map(|ch| x.at(b, ch, i, j))))
                .collect();
            let a = gate_map(g, &pooled, h, w);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = y.at(b, ch, i, j) + x.at(b, ch, i, j) * a[i * w + j];
                        y.set(b, ch, i, j, v);
                    }
                }
            }
        }
    }
    branches += [t.gate_cw.is_some(), t.gate_ch.is_some(), t.gate_hw.is_some()].iter().filter(|&&e| e).count() as f64;
    y.map(|v| v / branches)
}
