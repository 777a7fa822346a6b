//! Exit criteria. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{randomize, run, triplet_oracle};
use triplet_core::attention::{zero_weights, AttentionSpec, TripletAttentionConfig, DEFAULT_KERNEL};
use triplet_core::backbone::{ArchSpec, BlockType, Network};
use triplet_core::complexity::{estimate_macs, exact_count, resnet50_overhead_table, Mechanism};
use triplet_core::explain::{gradcam, pgm_bytes, read_pgm, to_byte, cam_internals};
use triplet_core::gradcheck::{run_suite, Suite, DEFAULT_INSTANCES};
use triplet_core::train::{ablate, metrics_csv, train, TrainConfig, Trainer};
use triplet_core::{Cbam, Mode, Se, Shape, Tape, Tensor, TripletAttention};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(value: f64, reference: f64, rel: f64) -> bool {
    ((value - reference) / reference).abs() <= rel
}

fn resnet50(attention: AttentionSpec) -> Network<f64> {
    Network::build(&ArchSpec::resnet50(attention), 0).unwrap()
}

fn triplet7() -> AttentionSpec {
    AttentionSpec::Triplet(TripletAttentionConfig::with_k(DEFAULT_KERNEL))
}

fn census_triplet() -> Verdict {
    let r = exact_count(&resnet50(triplet7())).unwrap();
    let t = r.totals;
    check(
        r.rows.len() == 16 && t.exact_params_conv_only == 4704 && t.formula_params == 4704 && t.exact_params_with_bn == 4800
            && within(t.exact_params_with_bn as f64, 0.0048e6, 0.005),
        format!("{} modules, conv weights {}, with batchnorm {} (reference 4.8K)", r.rows.len(), t.exact_params_conv_only, t.exact_params_with_bn),
    )
}

fn census_se_bam() -> Verdict {
    let se = exact_count(&resnet50(AttentionSpec::Se { reduction: 16 })).unwrap().totals.exact_params_conv_only;
    let table = resnet50_overhead_table();
    let row = |m: Mechanism| table.iter().find(|r| r.mechanism == m).unwrap();
    let bam = row(Mechanism::Bam).formula_total;
    let (cbam, gc) = (row(Mechanism::Cbam), row(Mechanism::Gc));
    let flagged = format!(
        "flagged: cbam {} ({:+.3}%), gc {} ({:+.3}%)",
        cbam.formula_total,
        100.0 * cbam.relative_delta,
        gc.formula_total,
        100.0 * gc.relative_delta
    );
    check(
        se == 2_514_944 && row(Mechanism::Se).formula_total == se && within(se as f64, 2.514e6, 0.0005)
            && bam == 354_928 && within(bam as f64, 0.358e6, 0.015),
        format!("se {se} vs 2.514M, bam {bam} vs 0.358M; {flagged}"),
    )
}

fn flop_estimate() -> Verdict {
    let net = resnet50(triplet7());
    let start = Instant::now();
    let est = estimate_macs(&net, [3, 224, 224]).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let added = est.attention.macs as f64;
    check(
        within(added, 4.7e7, 0.15) && elapsed < 1.0,
        format!("added MACs {:.4e} vs 4.7e7 ({:+.2}%), estimated in {:.3} s", added, 100.0 * (added - 4.7e7) / 4.7e7, elapsed),
    )
}

fn gradient_suite() -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut worst = (String::new(), 0.0f64);
    for s in Suite::ALL {
        let r = run_suite(s, DEFAULT_INSTANCES).unwrap();
        ok &= r.passed() && r.results.iter().all(|c| c.instances >= 20);
        for c in &r.results {
            if c.max_rel_error / c.tolerance > worst.1 {
                worst = (c.name.clone(), c.max_rel_error / c.tolerance);
            }
        }
        let redrawn: usize = r.results.iter().map(|c| c.redrawn).sum();
        lines.push(format!("{} {}/{} (redrawn {redrawn})", s.label(), r.results.len() - r.failures().count(), r.results.len()));
        for f in r.failures() {
            lines.push(format!("FAILED {} {:.2e}", f.name, f.max_rel_error));
        }
    }
    check(ok, format!("{}; worst {} at {:.1e} of tolerance", lines.join(", "), worst.0, worst.1))
}

fn zero_init() -> Verdict {
    let x = Tensor::uniform(Shape::new(2, 16, 6, 6), -4.0, 4.0, 1).unwrap();
    let mut t = TripletAttention::new("ta", TripletAttentionConfig::default(), 3).unwrap();
    let mut se = Se::new("se", 16, 4, 3).unwrap();
    let mut cb = Cbam::new("cbam", 16, 4, 7, 3).unwrap();
    zero_weights(&mut t);
    zero_weights(&mut se);
    zero_weights(&mut cb);
    let dt = run(&t, &x, Mode::Eval).max_abs_diff(&x.map(|v| v / 2.0));
    let ds = run(&se, &x, Mode::Eval).max_abs_diff(&x.map(|v| v / 2.0));
    let dc = run(&cb, &x, Mode::Eval).max_abs_diff(&x.map(|v| v / 4.0));
    check(dt < 1e-12 && ds < 1e-12 && dc < 1e-12, format!("max deviation triplet {dt:.1e}, se {ds:.1e}, cbam {dc:.1e}"))
}

fn structural_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut t = TripletAttention::new("ta", TripletAttentionConfig::default(), seed).unwrap();
        randomize(&mut t, seed);
        let x = Tensor::uniform(Shape::new(1, 4, 5, 5), -2.0, 2.0, 1000 + seed).unwrap();
        worst = worst.max(run(&t, &x, Mode::Eval).max_abs_diff(&triplet_oracle(&t, &x)));
    }
    check(worst < 1e-10, format!("50 random (1,4,5,5) inputs, max deviation {worst:.1e}"))
}

fn ablation() -> Verdict {
    let cfg = TrainConfig { epochs: 20, seed: 0, ..TrainConfig::synthetic(triplet7(), 2, 0.0) };
    let r = ablate::<f64>(&cfg).unwrap();
    let gates: Vec<usize> = r.rows.iter().map(|r| r.gates_per_module).collect();
    let params: Vec<usize> = r.rows.iter().map(|r| r.params).collect();
    let per_gate = 2 * 7 * 7 + 2;
    let modules = 2;
    let census_ok = r.rows.iter().all(|row| row.attention_params == modules * row.gates_per_module * per_gate);
    let increasing = params.windows(2).all(|w| w[0] < w[1]);
    let full = r.rows.iter().find(|r| r.variant == "full").unwrap();
    let best_partial = r.rows[1..3].iter().map(|r| r.eval_acc).fold(0.0, f64::max);
    check(
        gates == [0, 1, 2, 3] && census_ok && increasing && r.rows[0].attention_params == 0 && full.train_acc == 1.0,
        format!(
            "params {params:?}, gates {gates:?}, full train acc {} after 20 epochs (eval: full {}, best partial {best_partial}; soft check only)",
            full.train_acc, full.eval_acc
        ),
    )
}

fn zpool_contract() -> Verdict {
    let mut bad = 0;
    for seed in 0..1000u64 {
        let dims = [1 + seed as usize % 3, 1 + (seed as usize / 3) % 6, 1 + (seed as usize / 7) % 5, 1 + (seed as usize / 11) % 5];
        let x = Tensor::uniform(Shape(dims), -10.0, 10.0, seed).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let z = tape.zpool(v).unwrap();
        let z = tape.tensor(z);
        let [n, c, h, w] = dims;
        if z.shape() != Shape::new(n, 2, h, w) {
            bad += 1;
            continue;
        }
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut max = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    for ch in 0..c {
                        max = max.max(x.at(b, ch, i, j));
                        sum += x.at(b, ch, i, j);
                    }
                    if z.at(b, 0, i, j) != max || z.at(b, 1, i, j) != sum / c as f64 {
                        bad += 1;
                    }
                }
            }
        }
    }
    check(bad == 0, format!("1000 random tensors, {bad} mismatches"))
}

fn grad_cam() -> Verdict {
    // linear oracle: one conv block, class 0 reads channel 1 only
    let spec = ArchSpec {
        block_type: BlockType::Plain,
        stage_channels: vec![(3, 1, 1).into()],
        attention: AttentionSpec::None,
        num_classes: 2,
        input_shape: [2, 5, 5],
    };
    let mut net = Network::<f64>::build(&spec, 2).unwrap();
    net.head.weight.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i == 1 { 2.0 } else { 0.0 });
    let x = Tensor::uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, 4).unwrap();
    let act = cam_internals(&net, &x, 0, "stage0.block0").unwrap().activation;
    let chan: Vec<f64> = (0..25).map(|p| act.at(0, 1, p / 5, p % 5)).collect();
    let max = chan.iter().copied().fold(0.0, f64::max);
    let h = gradcam(&net, &x, 0, "stage0.block0", true).unwrap();
    let oracle_err = h.values.iter().zip(&chan).map(|(a, b)| (a - b / max).abs()).fold(0.0, f64::max);

    let mut in_range = true;
    let mut round_trip = true;
    for seed in 0..10 {
        let spec = ArchSpec::tiny_triplet(3, 4);
        let mut net = Network::<f64>::build(&spec, seed).unwrap();
        randomize(&mut net, seed);
        let x = Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, seed).unwrap();
        for layer in net.layer_names() {
            let h = gradcam(&net, &x, seed as usize % 4, &layer, true).unwrap();
            let (_, _, up) = h.pixels();
            in_range &= h.values.iter().chain(up).all(|v| (0.0..=1.0).contains(v));
            let (w, hh, px) = read_pgm(&pgm_bytes(&h)).unwrap();
            round_trip &= (w, hh) == (16, 16) && px == up.iter().map(|&v| to_byte(v)).collect::<Vec<_>>();
        }
    }
    let fixed = triplet_core::explain::Heatmap {
        height: 2,
        width: 2,
        values: vec![0.0, 1.0, 0.5, 0.25],
        source_layer: "x".into(),
        class_index: 0,
        upsampled: None,
    };
    let fixed_ok = pgm_bytes(&fixed)[11..] == [0, 255, 128, 64];
    check(
        oracle_err < 1e-6 && max > 0.0 && in_range && round_trip && fixed_ok,
        format!("linear oracle deviation {oracle_err:.1e}, values in [0,1]: {in_range}, PGM round trip: {round_trip}, scale-and-round: {fixed_ok}"),
    )
}

fn determinism() -> Verdict {
    let cfg = TrainConfig { epochs: 6, seed: 5, ..TrainConfig::synthetic(triplet7(), 3, 0.05) };
    let (ta, a) = train::<f64>(cfg.clone()).unwrap();
    let (_, b) = train::<f64>(cfg.clone()).unwrap();
    let same = metrics_csv(&a) == metrics_csv(&b);
    let mut first = Trainer::<f64>::new(cfg.clone()).unwrap();
    let mut rows: Vec<_> = (0..3).map(|_| first.run_epoch().unwrap()).collect();
    let bytes = first.checkpoint_bytes().unwrap();
    let mut resumed = Trainer::<f64>::new(cfg).unwrap();
    resumed.load_checkpoint_bytes(&bytes).unwrap();
    rows.extend(resumed.run(|_| {}).unwrap());
    let continuous = rows.len() == 6 && metrics_csv(&rows) == metrics_csv(&a);
    let params_equal = ta.checkpoint_bytes().unwrap() == resumed.checkpoint_bytes().unwrap();
    check(
        same && continuous && params_equal,
        format!("identical CSVs: {same}, resumed metrics bitwise equal: {continuous}, resumed checkpoint equal: {params_equal}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("parameter census, triplet", census_triplet),
        ("parameter census, se and bam", census_se_bam),
        ("multiply-accumulate estimate", flop_estimate),
        ("finite-difference gradient suite", gradient_suite),
        ("zero-initialized identities", zero_init),
        ("straight-loop structural oracle", structural_oracle),
        ("branch ablation harness", ablation),
        ("z-pool contract", zpool_contract),
        ("grad-cam", grad_cam),
        ("determinism and resume", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS criterion {:>2} {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {d} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
