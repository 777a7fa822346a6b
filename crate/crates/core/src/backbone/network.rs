//! Backbone construction and forward passes.

use super::arch::{ArchSpec, BlockType, BOTTLENECK_EXPANSION};
use crate::attention::AttentionModule;
use crate::error::{Error, Result};
use crate::module::{Context, Mode, Module, ParamKind};
use crate::nn::{BatchNorm2dState, Conv2dState};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{Shape, Tensor4};

/// Per-layer seed from the network seed and the layer's registry name, so a
/// layer's initial weights do not depend on which other layers exist.
pub fn layer_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn conv<T: Scalar>(seed: u64, name: String, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Conv2dState<T>> {
    let s = layer_seed(seed, &name);
    Conv2dState::new(name, c_in, c_out, k, stride, k / 2, false, s)
}

/// Convolve, normalize, optionally rectify.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub conv: Conv2dState<T>,
    pub bn: BatchNorm2dState<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new(seed: u64, prefix: &str, tag: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(ConvBn {
            conv: conv(seed, format!("{prefix}.{tag}"), c_in, c_out, k, stride)?,
            bn: BatchNorm2dState::new(format!("{prefix}.{}", bn_tag(tag)), c_out),
        })
    }

    pub fn apply(&self, ctx: &mut Context<T>, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        if relu {
            ctx.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

fn bn_tag(conv_tag: &str) -> String {
    match conv_tag.strip_prefix("conv") {
        Some(rest) => format!("bn{rest}"),
        None => format!("{conv_tag}_bn"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stem<T> {
    pub layer: ConvBn<T>,
    /// 3×3 stride-2 max pool after the stem (large inputs only).
    pub max_pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockBody<T> {
    Plain { main: ConvBn<T> },
    Basic { a: ConvBn<T>, b: ConvBn<T> },
    Bottleneck { a: ConvBn<T>, b: ConvBn<T>, c: ConvBn<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub body: BlockBody<T>,
    pub attention: Option<AttentionModule<T>>,
    /// Projection shortcut for residual blocks whose shape changes.
    pub downsample: Option<ConvBn<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn is_residual(&self) -> bool {
        !matches!(self.body, BlockBody::Plain { .. })
    }

    /// The residual branch up to (and including) its final batchnorm.
    pub fn branch(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        match &self.body {
            BlockBody::Plain { main } => main.apply(ctx, x, false),
            BlockBody::Basic { a, b } => {
                let y = a.apply(ctx, x, true)?;
                b.apply(ctx, y, false)
            }
            BlockBody::Bottleneck { a, b, c } => {
                let y = a.apply(ctx, x, true)?;
                let y = b.apply(ctx, y, true)?;
                c.apply(ctx, y, false)
            }
        }
    }

    /// Shortcut path; `None` for plain blocks.
    pub fn shortcut(&self, ctx: &mut Context<T>, x: Var) -> Result<Option<Var>> {
        if !self.is_residual() {
            return Ok(None);
        }
        match &self.downsample {
            Some(ds) => ds.apply(ctx, x, false).map(Some),
            None => Ok(Some(x)),
        }
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    /// `relu(shortcut(x) + attention(F(x)))`, or `relu(attention(F(x)))` for plain blocks.
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        let mut y = self.branch(ctx, x)?;
        if let Some(att) = &self.attention {
            y = att.forward(ctx, y)?;
        }
        if let Some(s) = self.shortcut(ctx, x)? {
            y = ctx.tape.add(y, s)?;
        }
        ctx.tape.relu(y)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        match &self.body {
            BlockBody::Plain { main } => main.visit(f),
            BlockBody::Basic { a, b } => {
                a.visit(f);
                b.visit(f);
            }
            BlockBody::Bottleneck { a, b, c } => {
                a.visit(f);
                b.visit(f);
                c.visit(f);
            }
        }
        if let Some(att) = &self.attention {
            att.visit(f);
        }
        if let Some(ds) = &self.downsample {
            ds.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        match &mut self.body {
            BlockBody::Plain { main } => main.visit_mut(f),
            BlockBody::Basic { a, b } => {
                a.visit_mut(f);
                b.visit_mut(f);
            }
            BlockBody::Bottleneck { a, b, c } => {
                a.visit_mut(f);
                b.visit_mut(f);
                c.visit_mut(f);
            }
        }
        if let Some(att) = &mut self.attention {
            att.visit_mut(f);
        }
        if let Some(ds) = &mut self.downsample {
            ds.visit_mut(f);
        }
    }
}

/// A built backbone: optional stem, blocks, global pooling and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: ArchSpec,
    pub stem: Option<Stem<T>>,
    pub blocks: Vec<Block<T>>,
    /// 1×1 convolution with bias acting as the fully connected classifier.
    pub head: Conv2dState<T>,
}

impl<T: Scalar> Network<T> {
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let in_c = spec.input_shape[0];
        let stem = match spec.stem_channels() {
            None => None,
            Some(width) if spec.uses_large_stem() => Some(Stem {
                layer: ConvBn::new(seed, "stem", "conv", in_c, width, 7, 2)?,
                max_pool: true,
            }),
            Some(width) => Some(Stem { layer: ConvBn::new(seed, "stem", "conv", in_c, width, 3, 1)?, max_pool: false }),
        };
        let mut channels = stem.as_ref().map_or(in_c, |s| s.layer.conv.c_out());
        let mut blocks = Vec::with_capacity(spec.total_blocks());
        for (si, stage) in spec.stage_channels.iter().enumerate() {
            for bi in 0..stage.block_count {
                let name = format!("stage{si}.block{bi}");
                let stride = if bi == 0 { stage.stride } else { 1 };
                let out = stage.channels;
                let body = match spec.block_type {
                    BlockType::Plain => BlockBody::Plain { main: ConvBn::new(seed, &name, "conv1", channels, out, 3, stride)? },
                    BlockType::ResnetBasic => BlockBody::Basic {
                        a: ConvBn::new(seed, &name, "conv1", channels, out, 3, stride)?,
                        b: ConvBn::new(seed, &name, "conv2", out, out, 3, 1)?,
                    },
                    BlockType::ResnetBottleneck => {
                        let width = out / BOTTLENECK_EXPANSION;
                        BlockBody::Bottleneck {
                            a: ConvBn::new(seed, &name, "conv1", channels, width, 1, 1)?,
                            b: ConvBn::new(seed, &name, "conv2", width, width, 3, stride)?,
                            c: ConvBn::new(seed, &name, "conv3", width, out, 1, 1)?,
                        }
                    }
                };
                let residual = spec.block_type != BlockType::Plain;
                let downsample = if residual && (stride != 1 || channels != out) {
                    Some(ConvBn::new(seed, &name, "downsample", channels, out, 1, stride)?)
                } else {
                    None
                };
                let att_name = format!("{name}.attn");
                let attention = spec.attention.build(&att_name, out, layer_seed(seed, &att_name))?;
                blocks.push(Block { name, in_channels: channels, out_channels: out, stride, body, attention, downsample });
                channels = out;
            }
        }
        let head_name = "head.fc".to_string();
        let hs = layer_seed(seed, &head_name);
        let head = Conv2dState::new(head_name, channels, spec.num_classes, 1, 1, 0, true, hs)?;
        let net = Network { spec: spec.clone(), stem, blocks, head };
        net.feature_shapes()?;
        Ok(net)
    }

    pub fn attention_modules(&self) -> impl Iterator<Item = &AttentionModule<T>> {
        self.blocks.iter().filter_map(|b| b.attention.as_ref())
    }

    /// Activation names recorded by a forward pass, in order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.stem.is_some() {
            names.push("stem".to_string());
        }
        names.extend(self.blocks.iter().map(|b| b.name.clone()));
        names
    }

    /// The last activation before global pooling and the head.
    pub fn default_cam_layer(&self) -> String {
        self.layer_names().pop().expect("a network has at least one block")
    }

    /// (C, H, W) after the stem and after every block, per batch element.
    pub fn feature_shapes(&self) -> Result<Vec<(String, [usize; 3])>> {
        let [_, mut h, mut w] = self.spec.input_shape;
        let mut out = Vec::new();
        let shrink = |len: usize, k: usize, s: usize, p: usize, what: &str| {
            crate::nn::conv_out_len(len, k, s, p)
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("input too small for {what}")))
        };
        if let Some(stem) = &self.stem {
            let k = stem.layer.conv.kernel();
            h = shrink(h, k, stem.layer.conv.stride, k / 2, "stem")?;
            w = shrink(w, k, stem.layer.conv.stride, k / 2, "stem")?;
            if stem.max_pool {
                h = shrink(h, 3, 2, 1, "stem pool")?;
                w = shrink(w, 3, 2, 1, "stem pool")?;
            }
            out.push(("stem".to_string(), [stem.layer.conv.c_out(), h, w]));
        }
        for b in &self.blocks {
            h = shrink(h, 3, b.stride, 1, &b.name)?;
            w = shrink(w, 3, b.stride, 1, &b.name)?;
            out.push((b.name.clone(), [b.out_channels, h, w]));
        }
        Ok(out)
    }

    /// Convenience forward returning logits (N, classes, 1, 1).
    pub fn predict(&self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let mut ctx = Context::new(mode).without_param_grads();
        let v = ctx.tape.constant(x.clone());
        let y = self.forward(&mut ctx, v)?;
        Ok(ctx.tape.tensor(y))
    }
}

impl<T: Scalar> Module<T> for Network<T> {
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        if s.0[1..] != self.spec.input_shape {
            return Err(Error::Dimension(format!(
                "network expects (N,{},{},{}) input, got {s}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
            )));
        }
        let mut y = x;
        if let Some(stem) = &self.stem {
            y = stem.layer.apply(ctx, y, true)?;
            if stem.max_pool {
                y = ctx.tape.maxpool2d(y, 3, 2, 1)?;
            }
            ctx.record_activation("stem", y);
        }
        for b in &self.blocks {
            y = b.forward(ctx, y)?;
            ctx.record_activation(&b.name, y);
        }
        let pooled = ctx.tape.gap(y)?;
        self.head.forward(ctx, pooled)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        if let Some(s) = &self.stem {
            s.layer.visit(f);
        }
        for b in &self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        if let Some(s) = &mut self.stem {
            s.layer.visit_mut(f);
        }
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Shape of a batch of `n` inputs for `spec`.
pub fn input_batch_shape(spec: &ArchSpec, n: usize) -> Shape {
    let [c, h, w] = spec.input_shape;
    Shape::new(n, c, h, w)
}
