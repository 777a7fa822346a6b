//! Layer trait, forward-pass context and the named parameter registry.

use std::collections::HashMap;
use std::io::{Read, Write};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Role of a registry entry, used by parameter accounting and serialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    MlpWeight,
    Bias,
    BnAffine,
    /// Batchnorm running statistic; serialized but not learnable.
    RunningStat,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningStat)
    }
}

/// Batch statistics observed by a batchnorm layer during a train-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
    pub momentum: T,
}

/// State carried through one forward pass: the tape, the mode, the leaf
/// created for every parameter, collected batch statistics and named
/// activations for later inspection.
pub struct Context<T> {
    pub tape: Tape<T>,
    mode: Mode,
    param_grads: bool,
    params: IndexMap<String, Var>,
    batch_stats: HashMap<String, BatchStats<T>>,
    activations: IndexMap<String, Var>,
}

impl<T: Scalar> Context<T> {
    pub fn new(mode: Mode) -> Self {
        Context {
            tape: Tape::new(),
            mode,
            param_grads: true,
            params: IndexMap::new(),
            batch_stats: HashMap::new(),
            activations: IndexMap::new(),
        }
    }

    /// Records parameters as constants: nothing upstream of the input is differentiated.
    pub fn without_param_grads(mut self) -> Self {
        self.param_grads = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Leaf for a named parameter; reused if the same name is requested twice.
    pub fn param(&mut self, name: &str, t: &Tensor4<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = if self.param_grads {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t.clone())
        };
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    pub(crate) fn record_batch_stats(&mut self, bn_name: &str, stats: BatchStats<T>) {
        self.batch_stats.insert(bn_name.to_string(), stats);
    }

    pub fn batch_stats(&self) -> &HashMap<String, BatchStats<T>> {
        &self.batch_stats
    }

    pub fn record_activation(&mut self, name: &str, v: Var) {
        self.activations.insert(name.to_string(), v);
    }

    pub fn activation(&self, name: &str) -> Option<Var> {
        self.activations.get(name).copied()
    }

    pub fn activation_names(&self) -> impl Iterator<Item = &str> {
        self.activations.keys().map(String::as_str)
    }

    /// Gradients of every parameter leaf, keyed by registry name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Vec<T>> {
        self.params
            .iter()
            .map(|(k, &v)| (k.clone(), grads.wrt(&self.tape, v)))
            .collect()
    }
}

/// A layer with named state.
pub trait Module<T: Scalar> {
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var>;

    /// Visits every registry entry (learnables and running statistics) in a stable order.
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, kind, t| {
            if kind.is_learnable() {
                n += t.len();
            }
        });
        n
    }

    /// Folds batch statistics from a train-mode pass into running estimates.
    fn commit_batch_stats(&mut self, stats: &HashMap<String, BatchStats<T>>) {
        self.visit_mut(&mut |name, kind, t| {
            if kind != ParamKind::RunningStat {
                return;
            }
            let (bn, field) = name.rsplit_once('.').expect("running stats are namespaced");
            let Some(s) = stats.get(bn) else { return };
            let src = match field {
                "running_mean" => &s.mean,
                "running_var" => &s.var_unbiased,
                _ => return,
            };
            let m = s.momentum;
            for (r, &b) in t.data_mut().iter_mut().zip(src) {
                *r = (T::one() - m) * *r + m * b;
            }
        });
    }

    /// Clones the registry as (name, kind, tensor) triples.
    fn state_entries(&self) -> Vec<(String, ParamKind, Tensor4<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, kind, t| out.push((name.to_string(), kind, t.clone())));
        out
    }

    fn save_state(&self, w: &mut dyn Write) -> Result<()> {
        let entries = self.state_entries();
        let refs: Vec<(&str, &Tensor4<T>)> = entries.iter().map(|(n, _, t)| (n.as_str(), t)).collect();
        write_entries(w, &refs)
    }

    /// Loads a registry written by [`Module::save_state`]; names and shapes must match exactly.
    fn load_state(&mut self, r: &mut dyn Read) -> Result<()> {
        let entries = read_entries::<T>(r)?;
        let mut index: HashMap<String, Tensor4<T>> = HashMap::new();
        for (n, t) in entries {
            index.insert(n, t);
        }
        let mut missing = None;
        let mut expected = 0;
        self.visit_mut(&mut |name, _, t| {
            expected += 1;
            match index.get(name) {
                Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
                _ => {
                    missing.get_or_insert_with(|| name.to_string());
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::Format {
                offset: 0,
                message: format!("entry `{name}` missing or mis-shaped in stored state"),
            });
        }
        if index.len() != expected {
            return Err(Error::Format {
                offset: 0,
                message: format!("stored state has {} entries, model has {expected}", index.len()),
            });
        }
        Ok(())
    }
}

fn shape_token(s: Shape) -> String {
    let [n, c, h, w] = s.0;
    format!("{n}x{c}x{h}x{w}")
}

/// Writes a manifest line of `name:NxCxHxW` tokens followed by the
/// little-endian `f64` payload of every entry in order.
pub fn write_entries<T: Scalar>(w: &mut dyn Write, entries: &[(&str, &Tensor4<T>)]) -> Result<()> {
    let io = |e| Error::io("<state stream>", e);
    let manifest: Vec<String> = entries
        .iter()
        .map(|(n, t)| {
            debug_assert!(!n.contains([' ', ':', '\n']));
            format!("{n}:{}", shape_token(t.shape()))
        })
        .collect();
    w.write_all(manifest.join(" ").as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    let mut buf = Vec::new();
    for (_, t) in entries {
        buf.clear();
        for &v in t.data() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

/// Inverse of [`write_entries`].
pub fn read_entries<T: Scalar>(r: &mut dyn Read) -> Result<Vec<(String, Tensor4<T>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<state stream>", e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        message: "missing manifest line".into(),
    })?;
    let manifest = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format {
        offset: 0,
        message: "manifest is not utf-8".into(),
    })?;
    let mut offset = nl + 1;
    let mut out = Vec::new();
    for tok in manifest.split(' ').filter(|t| !t.is_empty()) {
        let bad = |m: &str| Error::Format { offset: 0, message: format!("manifest token `{tok}`: {m}") };
        let (name, dims) = tok.rsplit_once(':').ok_or_else(|| bad("expected name:shape"))?;
        let dims: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad extent")))
            .collect::<Result<_>>()?;
        let dims: [usize; 4] = dims.try_into().map_err(|_| bad("expected four extents"))?;
        let shape = Shape(dims);
        let len = shape.numel();
        let end = offset + 8 * len;
        if end > bytes.len() {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("payload for `{name}` truncated"),
            });
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        out.push((name.to_string(), Tensor4::from_vec(shape, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format {
            offset: offset as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - offset),
        });
    }
    Ok(out)
}
