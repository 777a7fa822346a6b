//! SGD-with-momentum training, evaluation, checkpoints and branch ablations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSpec, TripletAttentionConfig, DEFAULT_KERNEL};
use crate::backbone::{layer_seed, ArchSpec, Network};
use crate::complexity::estimate_macs;
use crate::data::{gen_synthetic, load_cifar10, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::module::{read_entries, write_entries, Context, Mode, Module};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,eval_acc";
/// Fraction of a CIFAR-10 file held out for evaluation when no separate file is given.
pub const HOLDOUT_FRACTION: f64 = 0.1;

/// Either a path to an ArchSpec JSON file or the spec itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSource {
    Path(PathBuf),
    Inline(Box<ArchSpec>),
}

impl ArchSource {
    pub fn resolve(&self) -> Result<ArchSpec> {
        match self {
            ArchSource::Path(p) => ArchSpec::from_path(p),
            ArchSource::Inline(s) => {
                s.validate()?;
                Ok((**s).clone())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
}

fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_milestones() -> Vec<f64> {
    vec![0.5, 0.75]
}
fn default_decay() -> f64 {
    0.1
}

/// SGD with momentum; the learning rate is multiplied by `lr_decay` at each
/// milestone, given as a fraction of the total epoch count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_milestones")]
    pub lr_milestones: Vec<f64>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_milestones: default_milestones(),
            lr_decay: default_decay(),
        }
    }
}

impl OptimizerSpec {
    /// Learning rate for 0-based `epoch` out of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).floor() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }

    pub fn summary(&self, epochs: usize) -> String {
        let steps: Vec<String> = self
            .lr_milestones
            .iter()
            .map(|m| format!("x{} at epoch {}", self.lr_decay, (m * epochs as f64).floor() as usize))
            .collect();
        format!(
            "sgd-momentum lr={} momentum={} weight_decay={} schedule=[{}]",
            self.learning_rate,
            self.momentum,
            self.weight_decay,
            steps.join(", ")
        )
    }
}

fn default_noise() -> f64 {
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        train_samples: usize,
        eval_samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Cifar10Binary {
        path: PathBuf,
        #[serde(default)]
        eval_path: Option<PathBuf>,
        #[serde(default)]
        normalization: Normalization,
    },
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchSource,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Small separable problem on the tiny plain backbone.
    pub fn synthetic(attention: AttentionSpec, classes: usize, noise: f64) -> Self {
        TrainConfig {
            arch: ArchSource::Inline(Box::new(ArchSpec::tiny_plain(attention, classes))),
            optimizer: OptimizerSpec::default(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            dataset: DatasetSpec::Synthetic { classes, train_samples: 32, eval_samples: 16, noise },
            checkpoint: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let bad = |m: String| Err(Error::Config(m));
        if !(o.learning_rate > 0.0) || !o.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be positive", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(format!("momentum {} not in [0, 1)", o.momentum));
        }
        if !(o.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", o.weight_decay));
        }
        if !(o.lr_decay > 0.0) || o.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_decay must be positive and milestones fractions in [0, 1]".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2: batchnorm needs a batch", self.batch_size));
        }
        if let DatasetSpec::Synthetic { classes, train_samples, eval_samples, noise } = &self.dataset {
            if *classes == 0 || *train_samples < 2 || *eval_samples == 0 || !(*noise >= 0.0) {
                return bad("synthetic dataset needs classes ≥ 1, train_samples ≥ 2, eval_samples ≥ 1, noise ≥ 0".into());
            }
        }
        Ok(())
    }

    pub fn load_datasets<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        match &self.dataset {
            DatasetSpec::Synthetic { classes, train_samples, eval_samples, noise } => {
                let mut all = gen_synthetic(*classes, train_samples + eval_samples, self.seed, *noise)?;
                let eval = all.split_off(*train_samples);
                Ok((all, eval))
            }
            DatasetSpec::Cifar10Binary { path, eval_path, normalization } => {
                let mut train = load_cifar10(path, *normalization)?;
                let eval = match eval_path {
                    Some(p) => load_cifar10(p, *normalization)?,
                    None => {
                        let keep = train.len() - (train.len() as f64 * HOLDOUT_FRACTION).round() as usize;
                        train.split_off(keep)
                    }
                };
                Ok((train, eval))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.train_loss, self.train_acc, self.eval_acc)
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Scalar>(logits: &[T], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len().max(1);
    labels.iter().enumerate().filter(|&(i, &l)| argmax(&logits[i * k..(i + 1) * k]) == l).count()
}

/// Top-1 accuracy in eval mode; NaN for an empty set.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        correct += count_correct(net.predict(&x, Mode::Eval)?.data(), &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

const MOMENTUM_PREFIX: &str = "momentum.";
const EPOCH_ENTRY: &str = "meta.epoch";

/// Training state: network, momentum buffers and the number of finished epochs.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub spec: ArchSpec,
    pub net: Network<T>,
    pub velocity: IndexMap<String, Tensor4<T>>,
    pub epoch: usize,
    pub train_set: Dataset<T>,
    pub eval_set: Dataset<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.arch.resolve()?;
        let (train_set, eval_set) = config.load_datasets::<T>()?;
        for d in [&train_set, &eval_set] {
            if d.sample_shape != spec.input_shape {
                return Err(Error::Config(format!(
                    "dataset samples are {:?}, architecture expects {:?}",
                    d.sample_shape, spec.input_shape
                )));
            }
            if d.num_classes > spec.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, architecture has {} outputs",
                    d.num_classes, spec.num_classes
                )));
            }
        }
        let net = Network::build(&spec, config.seed)?;
        let mut velocity = IndexMap::new();
        net.visit(&mut |name, kind, t| {
            if kind.is_learnable() {
                velocity.insert(name.to_string(), Tensor4::zeros(t.shape()));
            }
        });
        Ok(Trainer { config, spec, net, velocity, epoch: 0, train_set, eval_set })
    }

    /// Rebuilds the trainer for `config` and restores a checkpoint into it.
    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        let mut t = Self::new(config)?;
        t.load_checkpoint(checkpoint)?;
        Ok(t)
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let opt = self.config.optimizer.clone();
        let lr = T::lit(opt.lr_at(epoch, self.config.epochs));
        let (mu, wd) = (T::lit(opt.momentum), T::lit(opt.weight_decay));
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(self.config.seed, &format!("epoch{epoch}")));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = self.train_set.batch(chunk);
            let mut ctx = Context::new(Mode::Train);
            let xv = ctx.tape.constant(x);
            let logits = self.net.forward(&mut ctx, xv)?;
            let loss = ctx.tape.cross_entropy(logits, &y)?;
            let lv = ctx.tape.value(loss)[0].to_f64_lossy();
            correct += count_correct(ctx.tape.value(logits), &y);
            let grads = ctx.tape.backward(loss)?;
            let pg = ctx.param_grads(&grads);
            let bad_grad = pg.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())).map(|(n, _)| n.clone());
            if !lv.is_finite() || bad_grad.is_some() {
                return Err(Error::NonFinite {
                    loss: lv,
                    epoch: epoch + 1,
                    param: bad_grad.unwrap_or_else(|| "<none>".into()),
                });
            }
            let velocity = &mut self.velocity;
            self.net.visit_mut(&mut |name, kind, w| {
                if !kind.is_learnable() {
                    return;
                }
                let (Some(g), Some(v)) = (pg.get(name), velocity.get_mut(name)) else { return };
                for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                    *vi = mu * *vi + gi + wd * *wi;
                    *wi = *wi - lr * *vi;
                }
            });
            self.net.commit_batch_stats(ctx.batch_stats());
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        self.epoch += 1;
        let eval_acc = evaluate(&self.net, &self.eval_set, self.config.batch_size)?;
        let denom = seen.max(1) as f64;
        Ok(EpochMetrics { epoch: self.epoch, train_loss: loss_sum / denom, train_acc: correct as f64 / denom, eval_acc })
    }

    /// Runs the remaining epochs, saving a checkpoint after each if configured.
    pub fn run(&mut self, on_epoch: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
        self.run_until(self.config.epochs, on_epoch)
    }

    /// As [`Trainer::run`], stopping once `epoch` epochs are complete. The
    /// learning-rate schedule still spans the configured epoch count.
    pub fn run_until(&mut self, epoch: usize, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while !self.is_done() && self.epoch < epoch {
            let m = self.run_epoch()?;
            if let Some(p) = self.config.checkpoint.clone() {
                self.save_checkpoint(&p)?;
            }
            on_epoch(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// Network registry, momentum buffers and epoch counter in the state-entry format.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let state = self.net.state_entries();
        let epoch = Tensor4::from_vec(Shape::scalar(), vec![T::from_usize_lossy(self.epoch)])?;
        let names: Vec<String> = self.velocity.keys().map(|k| format!("{MOMENTUM_PREFIX}{k}")).collect();
        let mut entries: Vec<(&str, &Tensor4<T>)> = state.iter().map(|(n, _, t)| (n.as_str(), t)).collect();
        entries.extend(names.iter().map(String::as_str).zip(self.velocity.values()));
        entries.push((EPOCH_ENTRY, &epoch));
        let mut buf = Vec::new();
        write_entries(&mut buf, &entries)?;
        Ok(buf)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint_bytes(&mut self, mut bytes: &[u8]) -> Result<()> {
        let entries = read_entries::<T>(&mut bytes)?;
        let mut net_entries = Vec::new();
        let mut epoch = None;
        for (name, t) in &entries {
            if name == EPOCH_ENTRY {
                epoch = Some(t.data()[0].to_f64_lossy() as usize);
            } else if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
                let v = self.velocity.get_mut(p).ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("checkpoint momentum for unknown parameter `{p}`"),
                })?;
                if v.shape() != t.shape() {
                    return Err(Error::Format { offset: 0, message: format!("momentum `{p}` is {}", t.shape()) });
                }
                v.data_mut().copy_from_slice(t.data());
            } else {
                net_entries.push((name.as_str(), t));
            }
        }
        let mut buf = Vec::new();
        write_entries(&mut buf, &net_entries)?;
        self.net.load_state(&mut buf.as_slice())?;
        self.epoch = epoch.ok_or_else(|| Error::Format { offset: 0, message: "checkpoint lacks epoch entry".into() })?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_checkpoint_bytes(&bytes)
    }
}

/// Trains to completion.
pub fn train<T: Scalar>(config: TrainConfig) -> Result<(Trainer<T>, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(config)?;
    let m = t.run(|_| {})?;
    Ok((t, m))
}

/// Learnable parameter count inside attention modules.
pub fn attention_params<T: Scalar>(net: &Network<T>) -> usize {
    net.attention_modules().map(|m| m.num_params()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub gates_per_module: usize,
    pub params: usize,
    pub attention_params: usize,
    pub macs: u64,
    pub attention_macs: u64,
    pub final_train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub epochs: usize,
    pub kernel: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "branch ablation (k={}, {} epochs, seed {})", self.kernel, self.epochs, self.seed);
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>10} {:>10} {:>12} {:>10} {:>9} {:>9}",
            "variant", "gates", "params", "attn", "macs", "attn_macs", "train", "eval"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>10} {:>10} {:>12} {:>10} {:>9.4} {:>9.4}",
                r.variant, r.gates_per_module, r.params, r.attention_params, r.macs, r.attention_macs, r.train_acc, r.eval_acc
            );
        }
        s
    }
}

/// The four variants: no attention, permuting branches off, spatial branch
/// off, and all three branches; kernel and rotation follow the configured
/// triplet settings when present.
pub fn ablation_variants(arch: &ArchSpec) -> Vec<(&'static str, usize, AttentionSpec)> {
    let base = match &arch.attention {
        AttentionSpec::Triplet(c) => c.clone(),
        _ => TripletAttentionConfig::with_k(DEFAULT_KERNEL),
    };
    let with = |channel: bool, spatial: bool| {
        AttentionSpec::Triplet(TripletAttentionConfig {
            branch_channel_enabled: channel,
            branch_spatial_enabled: spatial,
            ..base.clone()
        })
    };
    vec![
        ("baseline", 0, AttentionSpec::None),
        ("channel-off", 1, with(false, true)),
        ("spatial-off", 2, with(true, false)),
        ("full", 3, with(true, true)),
    ]
}

pub fn ablate<T: Scalar>(config: &TrainConfig) -> Result<AblationReport> {
    config.validate()?;
    let arch = config.arch.resolve()?;
    let kernel = match &arch.attention {
        AttentionSpec::Triplet(c) => c.k,
        _ => DEFAULT_KERNEL,
    };
    let mut rows = Vec::new();
    for (variant, gates, attention) in ablation_variants(&arch) {
        let spec = ArchSpec { attention, ..arch.clone() };
        let cfg = TrainConfig { arch: ArchSource::Inline(Box::new(spec.clone())), checkpoint: None, ..config.clone() };
        let (trainer, metrics) = train::<T>(cfg)?;
        let macs = estimate_macs(&trainer.net, spec.input_shape)?;
        let last = metrics.last().copied();
        rows.push(AblationRow {
            variant: variant.to_string(),
            gates_per_module: gates,
            params: trainer.net.num_params(),
            attention_params: attention_params(&trainer.net),
            macs: macs.total.macs,
            attention_macs: macs.attention.macs,
            final_train_loss: last.map_or(f64::NAN, |m| m.train_loss),
            train_acc: last.map_or(f64::NAN, |m| m.train_acc),
            eval_acc: last.map_or(f64::NAN, |m| m.eval_acc),
        });
    }
    Ok(AblationReport { seed: config.seed, epochs: config.epochs, kernel, rows })
}
