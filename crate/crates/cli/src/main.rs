//! `triplet`: training, evaluation, ablations, gradient checks, complexity
//! reports and Grad-CAM emission.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use triplet_core::attention::{AttentionSpec, TripletAttentionConfig, DEFAULT_KERNEL, DEFAULT_REDUCTION};
use triplet_core::backbone::{ArchSpec, Network};
use triplet_core::complexity::{exact_count, overhead_table_text, resnet50_overhead_table, Mechanism};
use triplet_core::explain::{emit_pgm, emit_ppm_overlay, gradcam, grayscale};
use triplet_core::gradcheck::{fault_injection_check, run_suite, Suite, DEFAULT_INSTANCES};
use triplet_core::train::{ablate, evaluate, metrics_csv, TrainConfig, Trainer};
use triplet_core::{Error, Mode, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "triplet", version, about = "Triplet attention research harness")]
struct Cli {
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training configuration JSON (train, eval, ablate, gradcam).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Ops,
    Attention,
    End2end,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network; writes metrics.csv, checkpoint.bin and run.json.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs (the schedule still spans the configured count).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on the configured held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train baseline, channel-off, spatial-off and full triplet variants.
    Ablate,
    /// Run finite-difference gradient suites.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        /// Add a check with a deliberately corrupted backward rule.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Parameter and MAC report for an architecture spec.
    Report {
        /// ArchSpec JSON file.
        spec: PathBuf,
        /// Replace the spec's attention with this mechanism (se, cbam, triplet, bam, gc).
        #[arg(long)]
        mechanism: Option<String>,
        /// Also print the closed-form ResNet-50 overhead table.
        #[arg(long)]
        table: bool,
    },
    /// Grad-CAM heatmap for one held-out sample.
    Gradcam {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the held-out split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Target class; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
        /// Activation to explain; defaults to the last pre-head activation.
        #[arg(long)]
        layer: Option<String>,
    },
}

enum Failure {
    Core(Error),
    Usage(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Format { .. } => EXIT_DATA,
                _ => EXIT_USAGE,
            })
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train { ref resume, stop_after } => train(&cli, resume.as_deref(), stop_after),
        Command::Eval { ref checkpoint } => eval(&cli, checkpoint),
        Command::Ablate => {
            let cfg = load_config(&cli)?;
            let report = ablate::<f64>(&cfg)?;
            let text = report.to_text();
            print!("{text}");
            write_out(&cli.out, "ablation.txt", text.as_bytes())?;
            write_out(&cli.out, "ablation.json", report.to_json().as_bytes())
        }
        Command::Gradcheck { suite, instances, inject_fault } => gradcheck(&cli, suite, instances, inject_fault),
        Command::Report { ref spec, ref mechanism, table } => report(&cli, spec, mechanism.as_deref(), table),
        Command::Gradcam { ref checkpoint, index, class, ref layer } => {
            explain(&cli, checkpoint.as_deref(), index, class, layer.as_deref())
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<TrainConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Usage("--config <json> is required".into()))?;
    let mut cfg = TrainConfig::from_path(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(&dir, e))?;
    let p = dir.join(name);
    std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

fn train(cli: &Cli, resume: Option<&Path>, stop_after: Option<usize>) -> Outcome {
    let mut cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cli.out.join("checkpoint.bin"));
    cfg.checkpoint = Some(ckpt.clone());
    let mut trainer = match resume {
        Some(p) => Trainer::<f64>::resume(cfg.clone(), p)?,
        None => Trainer::<f64>::new(cfg.clone())?,
    };
    let summary = serde_json::json!({
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "optimizer": cfg.optimizer.summary(cfg.epochs),
        "architecture": trainer.spec,
        "parameters": triplet_core::Module::num_params(&trainer.net),
        "start_epoch": trainer.epoch,
    });
    println!("# {}", cfg.optimizer.summary(cfg.epochs));
    let csv_path = cli.out.join("metrics.csv");
    let mut rows = Vec::new();
    if trainer.epoch > 0 {
        // keep rows of the epochs already run, if an earlier log is present
        if let Ok(prev) = std::fs::read_to_string(&csv_path) {
            rows.extend(prev.lines().skip(1).take(trainer.epoch).map(str::to_string));
        }
    }
    println!("{}", triplet_core::train::METRICS_HEADER);
    for r in &rows {
        println!("{r}");
    }
    let until = stop_after.unwrap_or(cfg.epochs);
    let metrics = trainer.run_until(until, |m| println!("{}", m.csv_row()))?;
    let mut csv = String::from(triplet_core::train::METRICS_HEADER);
    csv.push('\n');
    for r in rows.iter().cloned().chain(metrics.iter().map(|m| m.csv_row())) {
        csv.push_str(&r);
        csv.push('\n');
    }
    debug_assert!(resume.is_some() || csv == metrics_csv(&metrics));
    write_out(&cli.out, "metrics.csv", csv.as_bytes())?;
    write_out(&cli.out, "run.json", serde_json::to_string_pretty(&summary).expect("json").as_bytes())
}

fn eval(cli: &Cli, checkpoint: &Path) -> Outcome {
    let cfg = load_config(cli)?;
    let trainer = Trainer::<f64>::resume(cfg, checkpoint)?;
    let acc = evaluate(&trainer.net, &trainer.eval_set, trainer.config.batch_size)?;
    let out = serde_json::json!({ "epoch": trainer.epoch, "samples": trainer.eval_set.len(), "eval_acc": acc });
    println!("eval_acc={acc} samples={} epoch={}", trainer.eval_set.len(), trainer.epoch);
    write_out(&cli.out, "eval.json", serde_json::to_string_pretty(&out).expect("json").as_bytes())
}

fn gradcheck(cli: &Cli, suite: SuiteArg, instances: usize, inject_fault: bool) -> Outcome {
    let suites: Vec<Suite> = match suite {
        SuiteArg::Ops => vec![Suite::Ops],
        SuiteArg::Attention => vec![Suite::Attention],
        SuiteArg::End2end => vec![Suite::End2end],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let mut report = triplet_core::gradcheck::GradcheckReport::default();
    for s in suites {
        report.results.extend(run_suite(s, instances)?.results);
    }
    if inject_fault {
        report.results.push(fault_injection_check(instances)?);
    }
    let text = report.to_text();
    print!("{text}");
    write_out(&cli.out, "gradcheck.txt", text.as_bytes())?;
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
        Err(Failure::Verification(names.join(", ")))
    }
}

fn report(cli: &Cli, spec_path: &Path, mechanism: Option<&str>, table: bool) -> Outcome {
    let mut spec = ArchSpec::from_path(spec_path)?;
    if let Some(name) = mechanism {
        let m: Mechanism = name.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
        spec.attention = match m {
            Mechanism::Se => AttentionSpec::Se { reduction: DEFAULT_REDUCTION },
            Mechanism::Cbam => AttentionSpec::Cbam { reduction: DEFAULT_REDUCTION, k: DEFAULT_KERNEL },
            Mechanism::Triplet => AttentionSpec::Triplet(TripletAttentionConfig::default()),
            Mechanism::Bam | Mechanism::Gc => {
                return Err(Failure::Usage(format!(
                    "`{name}` has a closed-form row only (see --table); it cannot be built into a network"
                )))
            }
        };
    }
    let net = Network::<f64>::build(&spec, cli.seed.unwrap_or(0))?;
    let r = exact_count(&net)?;
    let mut text = r.to_text();
    if table {
        text.push('\n');
        text.push_str(&overhead_table_text(&resnet50_overhead_table()));
    }
    print!("{text}");
    write_out(&cli.out, "report.txt", text.as_bytes())?;
    write_out(&cli.out, "report.json", r.to_json().as_bytes())
}

fn explain(cli: &Cli, checkpoint: Option<&Path>, index: usize, class: Option<usize>, layer: Option<&str>) -> Outcome {
    let cfg = load_config(cli)?;
    let trainer = match checkpoint {
        Some(p) => Trainer::<f64>::resume(cfg, p)?,
        None => Trainer::<f64>::new(cfg)?,
    };
    if index >= trainer.eval_set.len() {
        return Err(Failure::Usage(format!("--index {index} but the held-out split has {} samples", trainer.eval_set.len())));
    }
    let (x, labels): (Tensor, _) = trainer.eval_set.batch(&[index]);
    let logits = trainer.net.predict(&x, Mode::Eval)?;
    let predicted = (0..logits.len()).fold(0, |b, i| if logits.data()[i] > logits.data()[b] { i } else { b });
    let class = class.unwrap_or(predicted);
    let layer = layer.map(str::to_string).unwrap_or_else(|| trainer.net.default_cam_layer());
    let h = gradcam(&trainer.net, &x, class, &layer, true)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    emit_pgm(&h, &cli.out.join("heatmap.pgm"))?;
    emit_ppm_overlay(&h, &grayscale(&x), &cli.out.join("overlay.ppm"))?;
    println!(
        "sample={index} label={} predicted={predicted} class={class} layer={layer} map={}x{}",
        labels[0], h.height, h.width
    );
    Ok(())
}
