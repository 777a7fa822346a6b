mod common;

use common::randomize;
use triplet_core::attention::{AttentionSpec, TripletAttentionConfig};
use triplet_core::backbone::{ArchSpec, BlockType, Network};
use triplet_core::explain::{cam_internals, emit_pgm, gradcam, read_pgm, to_byte};
use triplet_core::{Context, Error, Mode, Module, Shape, Tensor};

fn one_layer(classes: usize) -> Network<f64> {
    let spec = ArchSpec {
        block_type: BlockType::Plain,
        stage_channels: vec![(4, 1, 1).into()],
        attention: AttentionSpec::None,
        num_classes: classes,
        input_shape: [2, 6, 6],
    };
    Network::build(&spec, 11).unwrap()
}

fn resnet(seed: u64) -> Network<f64> {
    let spec = ArchSpec {
        block_type: BlockType::ResnetBasic,
        stage_channels: vec![(4, 1, 1).into(), (8, 1, 2).into()],
        attention: AttentionSpec::Triplet(TripletAttentionConfig::with_k(3)),
        num_classes: 3,
        input_shape: [3, 8, 8],
    };
    let mut net = Network::build(&spec, seed).unwrap();
    randomize(&mut net, seed);
    net
}

/// Hand-written conv3×3 (pad 1) → eval batchnorm → relu for one output channel.
fn channel_activation(net: &Network<f64>, x: &Tensor, oc: usize) -> Vec<f64> {
    let triplet_core::backbone::BlockBody::Plain { main } = &net.blocks[0].body else { unreachable!() };
    let [_, cin, h, w] = x.shape().0;
    let wt = &main.conv.weight;
    let bn = &main.bn;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for c in 0..cin {
                for di in 0..3 {
                    for dj in 0..3 {
                        let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                        if (0..h as isize).contains(&ii) && (0..w as isize).contains(&jj) {
                            acc += wt.at(oc, c, di, dj) * x.at(0, c, ii as usize, jj as usize);
                        }
                    }
                }
            }
            let z = bn.gamma.data()[oc] * (acc - bn.running_mean.data()[oc]) / (bn.running_var.data()[oc] + bn.eps).sqrt()
                + bn.beta.data()[oc];
            out[i * w + j] = z.max(0.0);
        }
    }
    out
}

#[test]
fn linear_network_matches_analytic_oracle() {
    for (chan, scale) in [(0usize, 1.0), (2, 0.37), (3, 4.0)] {
        let mut net = one_layer(2);
        let w = net.head.weight.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        w[chan] = scale; // class 0 reads channel `chan` only
        net.head.bias.as_mut().unwrap().data_mut().iter_mut().for_each(|v| *v = 0.25);
        let x = Tensor::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, chan as u64).unwrap();
        let internals = cam_internals(&net, &x, 0, "stage0.block0").unwrap();
        for (c, &a) in internals.alphas.iter().enumerate() {
            let expected = if c == chan { scale / 36.0 } else { 0.0 };
            assert!((a - expected).abs() < 1e-12, "alpha[{c}] = {a}");
        }
        let act = channel_activation(&net, &x, chan);
        let max = act.iter().copied().fold(0.0, f64::max);
        assert!(max > 0.0);
        let h = gradcam(&net, &x, 0, "stage0.block0", false).unwrap();
        assert_eq!((h.height, h.width), (6, 6));
        for (got, a) in h.values.iter().zip(&act) {
            assert!((got - a / max).abs() < 1e-6, "{got} vs {}", a / max);
        }
    }
}

#[test]
fn zero_head_gives_zero_map() {
    let mut net = resnet(1);
    net.head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let x = Tensor::uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, 1).unwrap();
    for layer in net.layer_names() {
        let h = gradcam(&net, &x, 1, &layer, true).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));
        assert!(h.upsampled.as_ref().unwrap().2.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn maps_lie_in_unit_interval_with_unit_max() {
    for seed in 0..8 {
        let net = resnet(seed);
        let x = Tensor::uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, seed + 50).unwrap();
        for layer in net.layer_names() {
            for class in 0..3 {
                let h = gradcam(&net, &x, class, &layer, true).unwrap();
                let (rows, cols, up) = h.pixels();
                assert_eq!((rows, cols), (8, 8));
                assert!(h.values.iter().chain(up).all(|&v| (0.0..=1.0).contains(&v)));
                let max = h.values.iter().copied().fold(0.0, f64::max);
                assert!(max == 0.0 || max == 1.0);
            }
        }
    }
}

#[test]
fn positive_head_scaling_leaves_map_unchanged() {
    let net = resnet(3);
    let mut scaled = net.clone();
    scaled.head.weight.data_mut().iter_mut().for_each(|v| *v *= 3.5);
    let x = Tensor::uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, 9).unwrap();
    for layer in net.layer_names() {
        let a = gradcam(&net, &x, 2, &layer, false).unwrap();
        let b = gradcam(&scaled, &x, 2, &layer, false).unwrap();
        for (p, q) in a.values.iter().zip(&b.values) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

/// Logit of `class` when the input of block `start_block` is replaced by
/// `a`, with the tape's relu/argmax signature.
fn logit_from(net: &Network<f64>, start_block: usize, a: &Tensor, class: usize) -> (f64, Vec<usize>) {
    let mut ctx = Context::new(Mode::Eval).without_param_grads();
    let mut y = ctx.tape.constant(a.clone());
    for b in &net.blocks[start_block..] {
        y = b.forward(&mut ctx, y).unwrap();
    }
    let p = ctx.tape.gap(y).unwrap();
    let l = net.head.forward(&mut ctx, p).unwrap();
    (ctx.tape.value(l)[class], ctx.tape.branch_signature())
}

#[test]
fn alphas_match_finite_differences_of_channel_mean() {
    let net = resnet(4);
    let x = Tensor::uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, 4).unwrap();
    for (layer, start) in [("stem", 0usize), ("stage0.block0", 1), ("stage1.block0", 2)] {
        let internals = cam_internals(&net, &x, 1, layer).unwrap();
        let act = &internals.activation;
        let hw = (act.shape().h() * act.shape().w()) as f64;
        let (_, base) = logit_from(&net, start, act, 1);
        let fd: Vec<f64> = (0..act.shape().c())
            .map(|c| {
                let shift = |d: f64| Tensor::from_fn(act.shape(), |n, ch, i, j| act.at(n, ch, i, j) + if ch == c { d } else { 0.0 });
                // shrink the step until both evaluations stay on the same smooth piece
                let mut eps = 1e-5;
                loop {
                    let ((lp, sp), (lm, sm)) = (logit_from(&net, start, &shift(eps), 1), logit_from(&net, start, &shift(-eps), 1));
                    if (sp == base && sm == base) || eps < 1e-9 {
                        break (lp - lm) / (2.0 * eps) / hw;
                    }
                    eps /= 4.0;
                }
            })
            .collect();
        let num: f64 = internals.alphas.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = internals.alphas.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(num / den < 1e-3, "{layer}: {}", num / den);
    }
}

#[test]
fn contract_errors() {
    let net = resnet(0);
    let x = Tensor::uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, 0).unwrap();
    assert!(matches!(gradcam(&net, &x, 0, "stage9", false), Err(Error::Lookup(_))));
    assert!(matches!(gradcam(&net, &x, 3, "stem", false), Err(Error::Contract(_))));
    let two = Tensor::concat_batch(&[x.clone(), x]).unwrap();
    assert!(matches!(gradcam(&net, &two, 0, "stem", false), Err(Error::Contract(_))));
    assert_eq!(net.default_cam_layer(), "stage1.block0");
}

#[test]
fn emitted_pgm_round_trips() {
    let net = resnet(6);
    let x = Tensor::uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, 6).unwrap();
    let h = gradcam(&net, &x, 0, "stage1.block0", true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.pgm");
    emit_pgm(&h, &p).unwrap();
    let (w, hh, px) = read_pgm(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!((w, hh), (8, 8));
    let expected: Vec<u8> = h.upsampled.as_ref().unwrap().2.iter().map(|&v| to_byte(v)).collect();
    assert_eq!(px, expected);
    assert!(matches!(emit_pgm(&h, &dir.path().join("missing/h.pgm")), Err(Error::Io { .. })));
}
