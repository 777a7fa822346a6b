//! Central finite-difference verification of every differentiable tape
//! operation, the attention modules and a small end-to-end network.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionSpec, CbamState, RotationVariant, SeState, TripletAttentionConfig, TripletAttentionState};
use crate::backbone::{ArchSpec, BlockType, Network};
use crate::error::{Error, Result};
use crate::module::{Context, Mode, Module};
use crate::tape::{CustomBackward, Tape, Var};
use crate::tensor::{Perm, Shape, Tensor4};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 20;
/// Gradient norms below this are compared absolutely rather than relatively.
pub const NORM_FLOOR: f64 = 1e-8;

/// Names of every differentiable operation the tape records.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "permute",
    "flip",
    "sum",
    "sigmoid",
    "relu",
    "conv2d",
    "batchnorm2d",
    "gap",
    "gmp",
    "zpool",
    "maxpool2d",
    "cross_entropy",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Ops,
    Attention,
    End2end,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Ops, Suite::Attention, Suite::End2end];

    pub fn label(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Attention => "attention",
            Suite::End2end => "end2end",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::End2end => END_TO_END_TOLERANCE,
            _ => OP_TOLERANCE,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck suite `{s}` (ops, attention, end2end)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub suite: Suite,
    pub instances: usize,
    /// Random instances discarded because a perturbation crossed a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "{} {:<10} {:<34} instances={:<3} redrawn={:<2} max_rel_error={:.3e} tolerance={:.0e}",
                if r.passed { "PASS" } else { "FAIL" },
                r.suite.label(),
                r.name,
                r.instances,
                r.redrawn,
                r.max_rel_error,
                r.tolerance
            );
        }
        let _ = writeln!(s, "{}/{} checks passed", self.results.len() - self.failures().count(), self.results.len());
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, NORM_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(NORM_FLOOR);
    diff / scale
}

/// Fixed random projection turning any output into a scalar loss whose
/// gradient is generic (a plain sum would give zero gradients through
/// batch normalization).
fn projection(shape: Shape, seed: u64) -> Tensor4<f64> {
    Tensor4::uniform(shape, -1.0, 1.0, seed ^ 0x005e_ed0f_9a3e).expect("non-empty shape")
}

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(projection(tape.shape(y), seed));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

pub type OpFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Outcome of one random instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Instance {
    /// Norm-wise relative error between tape and finite-difference gradients.
    Checked(f64),
    /// Some perturbation crossed a relu or argmax boundary, so central
    /// differences do not estimate the derivative there.
    Straddles,
}

/// Compares tape gradients of `sum(f(inputs) ⊙ R)` with every input against
/// central differences.
pub fn check_op(inputs: &[Tensor4<f64>], f: &OpFn, seed: u64) -> Result<Instance> {
    let mut straddles = false;
    let mut base = None;
    let mut eval = |xs: &[Tensor4<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let l = project(&mut tape, y, seed)?;
        let sig = tape.branch_signature();
        match &base {
            None => base = Some(sig),
            Some(b) => straddles |= *b != sig,
        }
        Ok(tape.value(l)[0])
    };
    eval(inputs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let l = project(&mut tape, y, seed)?;
    let grads = tape.backward(l)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        analytic.extend(grads.wrt(&tape, v));
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let lp = eval(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let lm = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            numeric.push((lp - lm) / (2.0 * FD_STEP));
        }
    }
    Ok(if straddles { Instance::Straddles } else { Instance::Checked(relative_error(&analytic, &numeric)) })
}

/// As [`check_op`] for a module: differentiates with respect to the input and
/// every learnable parameter in the given mode.
pub fn check_module(m: &mut dyn Module<f64>, x: &Tensor4<f64>, mode: Mode, seed: u64) -> Result<Instance> {
    fn run(m: &dyn Module<f64>, x: &Tensor4<f64>, mode: Mode, seed: u64) -> Result<(f64, Vec<usize>)> {
        let mut ctx = Context::new(mode).without_param_grads();
        let xv = ctx.tape.constant(x.clone());
        let y = m.forward(&mut ctx, xv)?;
        let l = project(&mut ctx.tape, y, seed)?;
        Ok((ctx.tape.value(l)[0], ctx.tape.branch_signature()))
    }
    let mut straddles = false;
    let mut ctx = Context::new(mode);
    let xv = ctx.tape.variable(x.clone());
    let y = m.forward(&mut ctx, xv)?;
    let l = project(&mut ctx.tape, y, seed)?;
    let base = ctx.tape.branch_signature();
    let mut eval = |m: &dyn Module<f64>, x: &Tensor4<f64>, mode: Mode, seed: u64| -> Result<f64> {
        let (v, sig) = run(m, x, mode, seed)?;
        straddles |= sig != base;
        Ok(v)
    };
    let grads = ctx.tape.backward(l)?;
    let mut analytic = grads.wrt(&ctx.tape, xv);
    let param_grads = ctx.param_grads(&grads);

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut xp = x.clone();
    for j in 0..xp.len() {
        let orig = xp.data()[j];
        xp.data_mut()[j] = orig + FD_STEP;
        let lp = eval(m, &xp, mode, seed)?;
        xp.data_mut()[j] = orig - FD_STEP;
        let lm = eval(m, &xp, mode, seed)?;
        xp.data_mut()[j] = orig;
        numeric.push((lp - lm) / (2.0 * FD_STEP));
    }

    let mut learnables = Vec::new();
    m.visit(&mut |name, kind, t| {
        if kind.is_learnable() {
            learnables.push((name.to_string(), t.len()));
        }
    });
    for (name, len) in learnables {
        let g = param_grads
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` was not used in the forward pass")))?;
        analytic.extend_from_slice(g);
        for j in 0..len {
            let mut lp = [0.0; 2];
            for (slot, delta) in [FD_STEP, -FD_STEP].into_iter().enumerate() {
                let mut orig = 0.0;
                perturb(m, &name, j, delta, &mut orig);
                lp[slot] = eval(m, x, mode, seed)?;
                restore(m, &name, j, orig);
            }
            numeric.push((lp[0] - lp[1]) / (2.0 * FD_STEP));
        }
    }
    Ok(if straddles { Instance::Straddles } else { Instance::Checked(relative_error(&analytic, &numeric)) })
}

fn perturb(m: &mut dyn Module<f64>, name: &str, j: usize, delta: f64, orig: &mut f64) {
    m.visit_mut(&mut |n, _, t| {
        if n == name {
            *orig = t.data()[j];
            t.data_mut()[j] = *orig + delta;
        }
    });
}

fn restore(m: &mut dyn Module<f64>, name: &str, j: usize, orig: f64) {
    m.visit_mut(&mut |n, _, t| {
        if n == name {
            t.data_mut()[j] = orig;
        }
    });
}

/// Values in (−1, 1) that are pairwise at least `1/m` apart and at least
/// `1/(2m)` away from zero, `m` being the element count rounded up to even: a
/// shuffled jittered grid. Max-type reductions and relu are then
/// differentiable within the finite-difference step at every sample, which
/// plain uniform draws do not guarantee.
pub fn separated_uniform(shape: Shape, seed: u64) -> Tensor4<f64> {
    let n = shape.numel();
    let slots = n + n % 2;
    let spacing = 2.0 / slots as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..n)
        .map(|k| -1.0 + (k as f64 + 0.5) * spacing + rng.random_range(-0.25..0.25) * spacing)
        .collect();
    values.shuffle(&mut rng);
    Tensor4::from_vec(shape, values).expect("length matches shape")
}

fn rand(shape: Shape, seed: u64) -> Tensor4<f64> {
    separated_uniform(shape, seed)
}

/// Instances that straddle a kink are redrawn; at most this many redraws per
/// requested instance are allowed before the check fails.
pub const MAX_REDRAWS_PER_INSTANCE: usize = 1;

fn collect(name: &str, suite: Suite, instances: usize, mut one: impl FnMut(u64) -> Result<Instance>) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let (mut checked, mut redrawn) = (0, 0);
    let mut seed = 0u64;
    while checked < instances && redrawn <= instances * MAX_REDRAWS_PER_INSTANCE {
        match one(seed)? {
            Instance::Checked(e) => {
                checked += 1;
                // NaN must fail the comparison below
                worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
            }
            Instance::Straddles => redrawn += 1,
        }
        seed += 1;
    }
    let tolerance = suite.tolerance();
    Ok(CheckResult {
        name: name.to_string(),
        suite,
        instances: checked,
        redrawn,
        max_rel_error: worst,
        tolerance,
        passed: checked >= instances && worst < tolerance,
    })
}

type Case = (&'static str, Vec<Shape>, Box<OpFn<'static>>);

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn op_cases() -> Vec<Case> {
    let x = s(2, 3, 4, 5);
    vec![
        ("add", vec![x, x], Box::new(|t, v| t.add(v[0], v[1]))),
        ("add (broadcast)", vec![x, s(1, 3, 1, 1)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![x, x], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul (broadcast)", vec![x, s(2, 1, 4, 5)], Box::new(|t, v| t.broadcast_mul(v[0], v[1]))),
        ("scale", vec![x], Box::new(|t, v| t.scale(v[0], 0.7))),
        ("permute (C<->W)", vec![x], Box::new(|t, v| t.permute(v[0], Perm::SWAP_CW))),
        ("permute (C<->H)", vec![x], Box::new(|t, v| t.permute(v[0], Perm::SWAP_CH))),
        ("flip (axis 1)", vec![x], Box::new(|t, v| t.flip(v[0], 1))),
        ("flip (axis 2)", vec![x], Box::new(|t, v| t.flip(v[0], 2))),
        ("flip (axis 3)", vec![x], Box::new(|t, v| t.flip(v[0], 3))),
        ("sum", vec![x], Box::new(|t, v| t.sum(v[0]))),
        (
            "sigmoid",
            vec![x],
            Box::new(|t, v| {
                let wide = t.scale(v[0], 6.0)?;
                t.sigmoid(wide)
            }),
        ),
        ("relu", vec![x], Box::new(|t, v| t.relu(v[0]))),
        (
            "conv2d (k3 s1 p1, bias)",
            vec![s(2, 3, 5, 5), s(4, 3, 3, 3), s(1, 4, 1, 1)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        ("conv2d (k3 s2 p0)", vec![s(2, 3, 5, 5), s(2, 3, 3, 3)], Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 0))),
        ("conv2d (k1)", vec![s(1, 4, 3, 3), s(2, 4, 1, 1)], Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, 0))),
        (
            "batchnorm2d (train)",
            vec![s(2, 3, 4, 4), s(1, 3, 1, 1), s(1, 3, 1, 1)],
            Box::new(|t, v| Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)),
        ),
        (
            "batchnorm2d (eval)",
            vec![s(2, 3, 4, 4), s(1, 3, 1, 1), s(1, 3, 1, 1)],
            Box::new(|t, v| t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)),
        ),
        ("gap", vec![x], Box::new(|t, v| t.gap(v[0]))),
        ("gmp", vec![x], Box::new(|t, v| t.gmp(v[0]))),
        ("zpool", vec![s(2, 4, 5, 5)], Box::new(|t, v| t.zpool(v[0]))),
        ("maxpool2d (k3 s2 p1)", vec![s(2, 3, 5, 5)], Box::new(|t, v| t.maxpool2d(v[0], 3, 2, 1))),
        (
            "cross_entropy",
            vec![s(4, 5, 1, 1)],
            Box::new(|t, v| {
                let wide = t.scale(v[0], 3.0)?;
                t.cross_entropy(wide, &[0, 3, 4, 1])
            }),
        ),
    ]
}

pub fn ops_suite(instances: usize) -> Result<Vec<CheckResult>> {
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            collect(name, Suite::Ops, instances, |seed| {
                let inputs: Vec<_> = shapes.iter().enumerate().map(|(i, &sh)| rand(sh, seed * 31 + i as u64)).collect();
                check_op(&inputs, f.as_ref(), seed)
            })
        })
        .collect()
}

pub fn attention_suite(instances: usize) -> Result<Vec<CheckResult>> {
    let x = s(1, 4, 5, 5);
    let triplet = |cfg: TripletAttentionConfig, mode: Mode| {
        move |seed: u64| {
            let mut m = TripletAttentionState::<f64>::new("ta", cfg.clone(), seed)?;
            check_module(&mut m, &rand(x, seed + 1000), mode, seed)
        }
    };
    let flip = TripletAttentionConfig { rotation_variant: RotationVariant::TransposeWithFlip, ..TripletAttentionConfig::with_k(3) };
    Ok(vec![
        collect("triplet (k7, train)", Suite::Attention, instances, triplet(TripletAttentionConfig::default(), Mode::Train))?,
        collect("triplet (k3, eval)", Suite::Attention, instances, triplet(TripletAttentionConfig::with_k(3), Mode::Eval))?,
        collect("triplet channel-off (train)", Suite::Attention, instances, triplet(TripletAttentionConfig::channel_off(3), Mode::Train))?,
        collect("triplet spatial-off (train)", Suite::Attention, instances, triplet(TripletAttentionConfig::spatial_off(3), Mode::Train))?,
        collect("triplet transpose-with-flip", Suite::Attention, instances, triplet(flip, Mode::Train))?,
        collect("se (r2)", Suite::Attention, instances, |seed| {
            let mut m = SeState::<f64>::new("se", 4, 2, seed)?;
            check_module(&mut m, &rand(s(2, 4, 5, 5), seed + 1000), Mode::Train, seed)
        })?,
        collect("cbam (r2, k3, train)", Suite::Attention, instances, |seed| {
            let mut m = CbamState::<f64>::new("cbam", 4, 2, 3, seed)?;
            check_module(&mut m, &rand(s(2, 4, 5, 5), seed + 1000), Mode::Train, seed)
        })?,
        collect("cbam (r2, k3, eval)", Suite::Attention, instances, |seed| {
            let mut m = CbamState::<f64>::new("cbam", 4, 2, 3, seed)?;
            check_module(&mut m, &rand(s(2, 4, 5, 5), seed + 1000), Mode::Eval, seed)
        })?,
    ])
}

/// Two residual basic blocks with triplet attention on 3×8×8 inputs.
pub fn end_to_end_arch() -> ArchSpec {
    ArchSpec {
        block_type: BlockType::ResnetBasic,
        stage_channels: vec![(4, 1, 1).into(), (8, 1, 2).into()],
        attention: AttentionSpec::Triplet(TripletAttentionConfig::with_k(3)),
        num_classes: 3,
        input_shape: [3, 8, 8],
    }
}

pub fn end_to_end_suite(instances: usize) -> Result<Vec<CheckResult>> {
    let spec = end_to_end_arch();
    let [c, h, w] = spec.input_shape;
    Ok(vec![collect("resnet-basic x2 + triplet (train)", Suite::End2end, instances, |seed| {
        let mut net = Network::<f64>::build(&spec, seed)?;
        check_module(&mut net, &rand(s(2, c, h, w), seed + 1000), Mode::Train, seed)
    })?])
}

pub fn run_suite(suite: Suite, instances: usize) -> Result<GradcheckReport> {
    let results = match suite {
        Suite::Ops => ops_suite(instances)?,
        Suite::Attention => attention_suite(instances)?,
        Suite::End2end => end_to_end_suite(instances)?,
    };
    Ok(GradcheckReport { results })
}

/// A sigmoid whose backward rule is off by a factor of two; the suite must reject it.
pub fn faulty_sigmoid(tape: &mut Tape<f64>, a: Var) -> Result<Var> {
    let value: Vec<f64> = tape.value(a).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let backward: CustomBackward<f64> = Box::new(|_, out, g| {
        vec![out.iter().zip(g).map(|(&y, &g)| 2.0 * g * y * (1.0 - y)).collect()]
    });
    tape.custom(&[a], tape.shape(a), value, backward)
}

pub fn fault_injection_check(instances: usize) -> Result<CheckResult> {
    collect("sigmoid (corrupted backward)", Suite::Ops, instances, |seed| {
        check_op(&[rand(s(2, 3, 4, 5), seed)], &|t, v| faulty_sigmoid(t, v[0]), seed)
    })
}
