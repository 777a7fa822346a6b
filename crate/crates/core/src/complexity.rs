//! Parameter and multiply-accumulate accounting.
//!
//! Closed-form parameter formulas for SE, CBAM, BAM, GC and triplet
//! attention are evaluated exactly and cross-checked against counts walked
//! from a built [`Network`]'s registry. Compute is reported in two columns:
//! `macs` counts multiply-accumulates of convolutions and linear maps
//! (1 MAC = 1 FLOP); `elementwise_ops` counts one op per element read by
//! pooling, normalization, activations and elementwise products/sums.
//! Permutations are data movement and cost nothing.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::Serialize;

use crate::attention::{AttentionGateState, AttentionModule, CbamState, SeState, TripletAttentionState};
use crate::backbone::{Block, BlockBody, ConvBn, Network};
use crate::error::{Error, Result};
use crate::module::{Module, ParamKind};
use crate::nn::{conv_out_len, Conv2dState, Mlp2State};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Se,
    Cbam,
    Bam,
    Gc,
    Triplet,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [Mechanism::Se, Mechanism::Cbam, Mechanism::Bam, Mechanism::Gc, Mechanism::Triplet];

    pub fn label(self) -> &'static str {
        match self {
            Mechanism::Se => "se",
            Mechanism::Cbam => "cbam",
            Mechanism::Bam => "bam",
            Mechanism::Gc => "gc",
            Mechanism::Triplet => "triplet",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            Mechanism::Se => "2C^2/r",
            Mechanism::Cbam => "2C^2/r + 2k^2",
            Mechanism::Bam => "C/r(3C + 2k^2C/r + 1)",
            Mechanism::Gc => "2C^2/r + C",
            Mechanism::Triplet => "6k^2",
        }
    }

    /// Published ResNet-50 overhead, in parameters.
    pub fn reference_overhead(self) -> f64 {
        match self {
            Mechanism::Se => 2.514e6,
            Mechanism::Cbam => 2.532e6,
            Mechanism::Bam => 0.358e6,
            Mechanism::Gc => 2.548e6,
            Mechanism::Triplet => 0.0048e6,
        }
    }

    /// Kernel size used for the ResNet-50 overhead comparison.
    pub fn reference_kernel(self) -> usize {
        match self {
            Mechanism::Bam => 3,
            _ => 7,
        }
    }

    fn uses_reduction(self) -> bool {
        self != Mechanism::Triplet
    }

    fn uses_kernel(self) -> bool {
        matches!(self, Mechanism::Cbam | Mechanism::Bam | Mechanism::Triplet)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.label() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown attention mechanism `{s}` (expected se, cbam, bam, gc or triplet)")))
    }
}

/// Exact evaluation of a mechanism's parameter formula for one placement.
pub fn formula_params(mechanism: Mechanism, channels: u64, reduction: u64, k: u64) -> Result<u64> {
    if mechanism.uses_reduction() && (reduction == 0 || channels % reduction != 0) {
        return Err(Error::Config(format!("{mechanism}: reduction {reduction} must divide C = {channels}")));
    }
    if mechanism.uses_kernel() && k % 2 == 0 {
        return Err(Error::Config(format!("{mechanism}: kernel size {k} must be odd")));
    }
    let c = channels;
    Ok(match mechanism {
        Mechanism::Se => 2 * c * c / reduction,
        Mechanism::Cbam => 2 * c * c / reduction + 2 * k * k,
        Mechanism::Bam => c / reduction * (3 * c + 2 * k * k * c / reduction + 1),
        Mechanism::Gc => 2 * c * c / reduction + c,
        Mechanism::Triplet => 6 * k * k,
    })
}

/// Output widths of the 16 ResNet-50 bottleneck blocks.
pub const RESNET50_BLOCK_CHANNELS: [(u64, usize); 4] = [(256, 3), (512, 4), (1024, 6), (2048, 3)];

/// Stage transitions where BAM is placed (three placements in total).
pub const BAM_PLACEMENTS: [u64; 3] = [256, 512, 1024];

/// Channel widths at which `mechanism` is instantiated in ResNet-50.
pub fn resnet50_placements(mechanism: Mechanism) -> Vec<u64> {
    if mechanism == Mechanism::Bam {
        return BAM_PLACEMENTS.to_vec();
    }
    RESNET50_BLOCK_CHANNELS
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
        .collect()
}

/// Sum of [`formula_params`] over the ResNet-50 placements.
pub fn resnet50_overhead(mechanism: Mechanism, reduction: u64, k: u64) -> Result<u64> {
    resnet50_placements(mechanism)
        .into_iter()
        .map(|c| formula_params(mechanism, c, reduction, k))
        .sum()
}

/// Batchnorm affine parameters carried by our executable modules on top of
/// the formula count, per placement.
pub fn batchnorm_affine_per_module(mechanism: Mechanism) -> u64 {
    match mechanism {
        Mechanism::Triplet => 6,
        Mechanism::Cbam => 2,
        _ => 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadRow {
    pub mechanism: Mechanism,
    pub formula: &'static str,
    pub reduction: u64,
    pub k: u64,
    pub placements: usize,
    pub formula_total: u64,
    pub with_bn_total: u64,
    pub reference: f64,
    /// (formula_total − reference) / reference
    pub relative_delta: f64,
    pub with_bn_relative_delta: f64,
}

/// ResNet-50 overhead table for every mechanism at r = 16 and each
/// mechanism's reference kernel size.
pub fn resnet50_overhead_table() -> Vec<OverheadRow> {
    Mechanism::ALL
        .into_iter()
        .map(|m| {
            let k = m.reference_kernel() as u64;
            let placements = resnet50_placements(m).len();
            let formula_total = resnet50_overhead(m, 16, k).expect("reference configuration is valid");
            let with_bn_total = formula_total + placements as u64 * batchnorm_affine_per_module(m);
            let reference = m.reference_overhead();
            OverheadRow {
                mechanism: m,
                formula: m.formula(),
                reduction: 16,
                k,
                placements,
                formula_total,
                with_bn_total,
                reference,
                relative_delta: (formula_total as f64 - reference) / reference,
                with_bn_relative_delta: (with_bn_total as f64 - reference) / reference,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub macs: u64,
    pub elementwise_ops: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.macs += o.macs;
        self.elementwise_ops += o.elementwise_ops;
    }
}

type Chw = [usize; 3];

fn numel([c, h, w]: Chw) -> u64 {
    (c * h * w) as u64
}

fn conv_cost<T: Scalar>(conv: &Conv2dState<T>, [_, h, w]: Chw) -> Result<(Chw, Cost)> {
    let (oh, ow) = conv
        .out_hw(h, w)
        .ok_or_else(|| Error::Dimension(format!("conv `{}` does not fit {h}x{w}", conv.name)))?;
    let k = conv.kernel() as u64;
    let out = [conv.c_out(), oh, ow];
    let macs = (conv.c_out() * conv.c_in()) as u64 * k * k * (oh * ow) as u64;
    let bias = if conv.bias.is_some() { numel(out) } else { 0 };
    Ok((out, Cost { macs, elementwise_ops: bias }))
}

fn convbn_cost<T: Scalar>(l: &ConvBn<T>, s: Chw, relu: bool) -> Result<(Chw, Cost)> {
    let (out, mut cost) = conv_cost(&l.conv, s)?;
    cost.elementwise_ops += numel(out) * if relu { 2 } else { 1 };
    Ok((out, cost))
}

fn mlp_cost<T: Scalar>(m: &Mlp2State<T>) -> Cost {
    let (c, hidden) = (m.channels() as u64, m.hidden() as u64);
    Cost { macs: 2 * c * hidden, elementwise_ops: hidden }
}

/// Z-pool (reads the whole input), conv over the pooled map, batchnorm and sigmoid.
fn gate_cost<T: Scalar>(g: &AttentionGateState<T>, s: Chw) -> Result<Cost> {
    let mut cost = Cost { macs: 0, elementwise_ops: numel(s) };
    let (out, c) = conv_cost(&g.conv, [2, s[1], s[2]])?;
    cost += c;
    cost.elementwise_ops += 2 * numel(out);
    Ok(cost)
}

fn triplet_cost<T: Scalar>(t: &TripletAttentionState<T>, s @ [c, h, w]: Chw) -> Result<Cost> {
    let mut cost = Cost::default();
    let mut branches = 0;
    // branch inputs after permutation: (W,H,C), (H,C,W), (C,H,W)
    for (gate, shape) in [(&t.gate_cw, [w, h, c]), (&t.gate_ch, [h, c, w]), (&t.gate_hw, s)] {
        if let Some(g) = gate {
            cost += gate_cost(g, shape)?;
            cost.elementwise_ops += numel(s);
            branches += 1;
        }
    }
    if branches > 1 {
        cost.elementwise_ops += numel(s) * branches as u64;
    }
    Ok(cost)
}

fn se_cost<T: Scalar>(se: &SeState<T>, s @ [c, _, _]: Chw) -> Cost {
    let mut cost = mlp_cost(&se.mlp);
    cost.elementwise_ops += numel(s) + c as u64 + numel(s);
    cost
}

fn cbam_cost<T: Scalar>(cb: &CbamState<T>, s @ [c, _, _]: Chw) -> Result<Cost> {
    let mut cost = mlp_cost(&cb.mlp);
    cost += mlp_cost(&cb.mlp);
    // gap + gmp, sum + sigmoid, channel product
    cost.elementwise_ops += 2 * numel(s) + 2 * c as u64 + numel(s);
    cost += gate_cost(&cb.spatial, s)?;
    cost.elementwise_ops += numel(s);
    Ok(cost)
}

pub fn attention_cost<T: Scalar>(m: &AttentionModule<T>, s: Chw) -> Result<Cost> {
    match m {
        AttentionModule::Se(se) => Ok(se_cost(se, s)),
        AttentionModule::Cbam(cb) => cbam_cost(cb, s),
        AttentionModule::Triplet(t) => triplet_cost(t, s),
    }
}

fn block_cost<T: Scalar>(b: &Block<T>, s: Chw) -> Result<(Chw, Cost, Cost)> {
    let mut cost = Cost::default();
    let out = match &b.body {
        BlockBody::Plain { main } => {
            let (o, c) = convbn_cost(main, s, false)?;
            cost += c;
            o
        }
        BlockBody::Basic { a, b: second } => {
            let (o, c1) = convbn_cost(a, s, true)?;
            let (o, c2) = convbn_cost(second, o, false)?;
            cost += c1;
            cost += c2;
            o
        }
        BlockBody::Bottleneck { a, b: mid, c } => {
            let (o, c1) = convbn_cost(a, s, true)?;
            let (o, c2) = convbn_cost(mid, o, true)?;
            let (o, c3) = convbn_cost(c, o, false)?;
            cost += c1;
            cost += c2;
            cost += c3;
            o
        }
    };
    let att = match &b.attention {
        Some(m) => attention_cost(m, out)?,
        None => Cost::default(),
    };
    cost += att;
    if let Some(ds) = &b.downsample {
        cost += convbn_cost(ds, s, false)?.1;
    }
    if b.is_residual() {
        cost.elementwise_ops += numel(out);
    }
    cost.elementwise_ops += numel(out);
    Ok((out, cost, att))
}

/// Network-wide compute for one input of shape (C, H, W).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MacEstimate {
    pub total: Cost,
    /// Share of `total` spent inside attention modules.
    pub attention: Cost,
}

pub fn estimate_macs<T: Scalar>(net: &Network<T>, input_shape: [usize; 3]) -> Result<MacEstimate> {
    Ok(walk(net, input_shape)?.0)
}

fn walk<T: Scalar>(net: &Network<T>, input_shape: Chw) -> Result<(MacEstimate, Vec<(String, Chw, Cost)>)> {
    let mut est = MacEstimate::default();
    let mut s = input_shape;
    if s[0] != net.spec.input_shape[0] {
        return Err(Error::Dimension(format!("network expects {} input channels, got {}", net.spec.input_shape[0], s[0])));
    }
    if let Some(stem) = &net.stem {
        let (o, c) = convbn_cost(&stem.layer, s, true)?;
        est.total += c;
        s = o;
        if stem.max_pool {
            let fit = |v| conv_out_len(v, 3, 2, 1).ok_or_else(|| Error::Dimension("stem pool does not fit".into()));
            s = [s[0], fit(s[1])?, fit(s[2])?];
            est.total.elementwise_ops += 9 * numel(s);
        }
    }
    let mut rows = Vec::new();
    for b in &net.blocks {
        let (o, c, att) = block_cost(b, s)?;
        est.total += c;
        est.attention += att;
        if let Some(m) = &b.attention {
            rows.push((m.name().to_string(), o, att));
        }
        s = o;
    }
    est.total.elementwise_ops += numel(s);
    est.total += conv_cost(&net.head, [s[0], 1, 1])?.1;
    Ok((est, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleRow {
    pub name: String,
    pub mechanism: String,
    pub channels: usize,
    pub formula_params: u64,
    pub exact_params_conv_only: u64,
    pub exact_params_with_bn: u64,
    pub macs: u64,
    pub elementwise_ops: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReportTotals {
    pub formula_params: u64,
    pub exact_params_conv_only: u64,
    pub exact_params_with_bn: u64,
    pub macs: u64,
    pub elementwise_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assumptions {
    pub reduction: Option<usize>,
    pub kernel: Option<usize>,
    pub counting_convention: String,
    pub flop_convention: String,
    pub input_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub architecture: String,
    pub attention: String,
    pub rows: Vec<ModuleRow>,
    /// Column sums over `rows`.
    pub totals: ReportTotals,
    pub network_params: u64,
    pub network: MacEstimate,
    pub assumptions: Assumptions,
}

impl ComplexityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "architecture: {}  attention: {}", self.architecture, self.attention);
        let _ = writeln!(
            s,
            "{:<24} {:>9} {:>8} {:>12} {:>12} {:>12} {:>14} {:>14}",
            "module", "mechanism", "C", "formula", "conv_only", "with_bn", "macs", "elementwise"
        );
        let mut line = |name: &str, mech: &str, c: String, t: ReportTotals| {
            let _ = writeln!(
                s,
                "{:<24} {:>9} {:>8} {:>12} {:>12} {:>12} {:>14} {:>14}",
                name, mech, c, t.formula_params, t.exact_params_conv_only, t.exact_params_with_bn, t.macs, t.elementwise_ops
            );
        };
        for r in &self.rows {
            line(
                &r.name,
                &r.mechanism,
                r.channels.to_string(),
                ReportTotals {
                    formula_params: r.formula_params,
                    exact_params_conv_only: r.exact_params_conv_only,
                    exact_params_with_bn: r.exact_params_with_bn,
                    macs: r.macs,
                    elementwise_ops: r.elementwise_ops,
                },
            );
        }
        line("total", "", String::new(), self.totals);
        let _ = writeln!(
            s,
            "network: params {}  macs {}  elementwise {}  (attention macs {})",
            self.network_params, self.network.total.macs, self.network.total.elementwise_ops, self.network.attention.macs
        );
        let a = &self.assumptions;
        let _ = writeln!(
            s,
            "assumptions: r={} k={} input={:?}; {}; {}",
            a.reduction.map_or("-".into(), |v| v.to_string()),
            a.kernel.map_or("-".into(), |v| v.to_string()),
            a.input_shape,
            a.counting_convention,
            a.flop_convention
        );
        s
    }
}

pub const COUNTING_CONVENTION: &str =
    "conv_only counts convolution and MLP weights; with_bn adds batchnorm gamma/beta; running statistics excluded";
pub const FLOP_CONVENTION: &str =
    "1 MAC = 1 FLOP over convolutions and linear maps; pooling, normalization, activations and products reported as elementwise ops (1 per element read)";

fn param_split<T: Scalar>(m: &dyn Module<T>) -> (u64, u64) {
    let (mut weights, mut affine) = (0u64, 0u64);
    m.visit(&mut |_, kind, t| match kind {
        ParamKind::ConvWeight | ParamKind::MlpWeight | ParamKind::Bias => weights += t.len() as u64,
        ParamKind::BnAffine => affine += t.len() as u64,
        ParamKind::RunningStat => {}
    });
    (weights, weights + affine)
}

/// Formula evaluation for a built attention module.
pub fn module_formula<T: Scalar>(m: &AttentionModule<T>, channels: usize) -> Result<u64> {
    let mech: Mechanism = m.mechanism().parse()?;
    formula_params(mech, channels as u64, m.reduction().unwrap_or(1) as u64, m.kernel().unwrap_or(1) as u64)
}

/// Walks the registry of every attention module and the network's compute.
pub fn exact_count<T: Scalar>(net: &Network<T>) -> Result<ComplexityReport> {
    let (network, costs) = walk(net, net.spec.input_shape)?;
    let mut rows = Vec::new();
    let mut totals = ReportTotals::default();
    for (block, (name, shape, cost)) in net.blocks.iter().filter(|b| b.attention.is_some()).zip(costs) {
        let m = block.attention.as_ref().expect("filtered");
        let (conv_only, with_bn) = param_split(m);
        let row = ModuleRow {
            name,
            mechanism: m.mechanism().to_string(),
            channels: shape[0],
            formula_params: module_formula(m, shape[0])?,
            exact_params_conv_only: conv_only,
            exact_params_with_bn: with_bn,
            macs: cost.macs,
            elementwise_ops: cost.elementwise_ops,
        };
        totals.formula_params += row.formula_params;
        totals.exact_params_conv_only += row.exact_params_conv_only;
        totals.exact_params_with_bn += row.exact_params_with_bn;
        totals.macs += row.macs;
        totals.elementwise_ops += row.elementwise_ops;
        rows.push(row);
    }
    let first = net.attention_modules().next();
    Ok(ComplexityReport {
        architecture: format!("{:?}", net.spec.block_type).to_lowercase(),
        attention: net.spec.attention.label().to_string(),
        rows,
        totals,
        network_params: net.num_params() as u64,
        network,
        assumptions: Assumptions {
            reduction: first.and_then(|m| m.reduction()),
            kernel: first.and_then(|m| m.kernel()),
            counting_convention: COUNTING_CONVENTION.to_string(),
            flop_convention: FLOP_CONVENTION.to_string(),
            input_shape: net.spec.input_shape,
        },
    })
}

/// Text rendering of [`resnet50_overhead_table`].
pub fn overhead_table_text(rows: &[OverheadRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<24} {:>3} {:>3} {:>10} {:>12} {:>12} {:>12} {:>9}",
        "module", "formula", "r", "k", "placements", "formula_sum", "with_bn", "reference", "delta"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:<24} {:>3} {:>3} {:>10} {:>12} {:>12} {:>12.0} {:>+8.3}%",
            r.mechanism.label(),
            r.formula,
            r.reduction,
            r.k,
            r.placements,
            r.formula_total,
            r.with_bn_total,
            r.reference,
            100.0 * r.relative_delta
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(formula_params(Mechanism::Triplet, 123, 16, 7).unwrap(), 294);
        assert_eq!(formula_params(Mechanism::Se, 64, 16, 7).unwrap(), 512);
        assert_eq!(formula_params(Mechanism::Bam, 256, 16, 3).unwrap(), 16 * (768 + 288 + 1));
        assert_eq!(formula_params(Mechanism::Gc, 64, 16, 7).unwrap(), 576);
        assert!(formula_params(Mechanism::Se, 60, 16, 7).is_err());
        assert!(formula_params(Mechanism::Triplet, 60, 16, 4).is_err());
    }

    #[test]
    fn parse_mechanisms() {
        assert_eq!("Triplet".parse::<Mechanism>().unwrap(), Mechanism::Triplet);
        assert!("nl".parse::<Mechanism>().is_err());
    }

    #[test]
    fn monotone_in_channels() {
        for m in [Mechanism::Se, Mechanism::Cbam, Mechanism::Bam, Mechanism::Gc] {
            let mut last = 0;
            for c in (16..=512).step_by(16) {
                let v = formula_params(m, c, 16, 3).unwrap();
                assert!(v >= last);
                last = v;
            }
        }
        let t: Vec<u64> = (16..=512).step_by(16).map(|c| formula_params(Mechanism::Triplet, c, 16, 5).unwrap()).collect();
        assert!(t.iter().all(|&v| v == 150));
    }

    #[test]
    fn resnet50_sums() {
        assert_eq!(resnet50_overhead(Mechanism::Se, 16, 7).unwrap(), 2_514_944);
        assert_eq!(resnet50_overhead(Mechanism::Triplet, 16, 7).unwrap(), 4_704);
        assert_eq!(resnet50_overhead(Mechanism::Bam, 16, 3).unwrap(), 354_928);
        assert_eq!(resnet50_overhead(Mechanism::Cbam, 16, 7).unwrap(), 2_516_512);
        assert_eq!(resnet50_overhead(Mechanism::Gc, 16, 7).unwrap(), 2_530_048);
        let table = resnet50_overhead_table();
        let triplet = table.iter().find(|r| r.mechanism == Mechanism::Triplet).unwrap();
        assert_eq!(triplet.with_bn_total, 4_800);
    }
}
