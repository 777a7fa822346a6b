//! Three-branch cross-dimension attention.
//!
//! Branch 1 moves W into the channel slot, (N,C,H,W) -> (N,W,H,C), so its
//! gate sees an (H, C) plane. Branch 2 moves H into the channel slot,
//! (N,C,H,W) -> (N,H,C,W), so its gate sees a (C, W) plane. Branch 3 gates
//! the (H, W) plane of the unpermuted input. Each branch multiplies its
//! gate onto the tensor it pooled, the permuted ones are restored to the
//! input layout, and the results are averaged.

use serde::{Deserialize, Serialize};

use super::gate::AttentionGateState;
use crate::error::{Error, Result};
use crate::module::{Context, Module, ParamKind};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{Perm, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationVariant {
    /// Pure axis transposition.
    #[default]
    Transpose,
    /// Transposition followed by reversing the axis the channels moved to,
    /// i.e. a geometric quarter turn of the rotated plane.
    TransposeWithFlip,
}

fn default_k() -> usize {
    7
}
fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletAttentionConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Branches 1 and 2 (the permuting ones).
    #[serde(default = "yes")]
    pub branch_channel_enabled: bool,
    /// Branch 3 (no permutation).
    #[serde(default = "yes")]
    pub branch_spatial_enabled: bool,
    #[serde(default)]
    pub rotation_variant: RotationVariant,
}

impl Default for TripletAttentionConfig {
    fn default() -> Self {
        TripletAttentionConfig {
            k: 7,
            branch_channel_enabled: true,
            branch_spatial_enabled: true,
            rotation_variant: RotationVariant::Transpose,
        }
    }
}

impl TripletAttentionConfig {
    pub fn with_k(k: usize) -> Self {
        TripletAttentionConfig { k, ..Default::default() }
    }

    /// Table-4 style "channel off": only the unpermuted branch remains.
    pub fn channel_off(k: usize) -> Self {
        TripletAttentionConfig { k, branch_channel_enabled: false, ..Default::default() }
    }

    /// Table-4 style "spatial off": only the two permuting branches remain.
    pub fn spatial_off(k: usize) -> Self {
        TripletAttentionConfig { k, branch_spatial_enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.branch_channel_enabled && !self.branch_spatial_enabled {
            return Err(Error::Config("triplet attention needs at least one enabled branch".into()));
        }
        if self.k % 2 == 0 || self.k == 0 {
            return Err(Error::Config(format!("triplet kernel size must be odd, got {}", self.k)));
        }
        Ok(())
    }

    pub fn gate_count(&self) -> usize {
        2 * self.branch_channel_enabled as usize + self.branch_spatial_enabled as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletAttentionState<T> {
    pub name: String,
    /// Branch 1: (C, H) interaction, gate over the (H, C) plane.
    pub gate_cw: Option<AttentionGateState<T>>,
    /// Branch 2: (C, W) interaction, gate over the (C, W) plane.
    pub gate_ch: Option<AttentionGateState<T>>,
    /// Branch 3: spatial (H, W).
    pub gate_hw: Option<AttentionGateState<T>>,
    pub config: TripletAttentionConfig,
}

impl<T: Scalar> TripletAttentionState<T> {
    pub fn new(name: impl Into<String>, config: TripletAttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let name = name.into();
        let k = config.k;
        let gate = |tag: &str, off: u64, on: bool| -> Result<Option<AttentionGateState<T>>> {
            on.then(|| AttentionGateState::new(format!("{name}.{tag}"), k, seed.wrapping_add(off)))
                .transpose()
        };
        Ok(TripletAttentionState {
            gate_cw: gate("gate_cw", 0, config.branch_channel_enabled)?,
            gate_ch: gate("gate_ch", 1, config.branch_channel_enabled)?,
            gate_hw: gate("gate_hw", 2, config.branch_spatial_enabled)?,
            config,
            name,
        })
    }

    pub fn gates(&self) -> impl Iterator<Item = &AttentionGateState<T>> {
        [&self.gate_cw, &self.gate_ch, &self.gate_hw].into_iter().flatten()
    }

    /// One permuted branch: rotate, gate, scale, rotate back.
    pub fn rotated_branch(
        &self,
        ctx: &mut Context<T>,
        x: Var,
        perm: Perm,
        gate: &AttentionGateState<T>,
    ) -> Result<Var> {
        let flip = self.config.rotation_variant == RotationVariant::TransposeWithFlip;
        // the channel axis lands here after the transposition
        let c_axis = perm.inverse().0[0];
        let mut rotated = ctx.tape.permute(x, perm)?;
        if flip {
            rotated = ctx.tape.flip(rotated, c_axis)?;
        }
        let w = gate.forward(ctx, rotated)?;
        let mut y = ctx.tape.broadcast_mul(rotated, w)?;
        if flip {
            y = ctx.tape.flip(y, c_axis)?;
        }
        ctx.tape.permute(y, perm.inverse())
    }

    pub fn spatial_branch(&self, ctx: &mut Context<T>, x: Var, gate: &AttentionGateState<T>) -> Result<Var> {
        let w = gate.forward(ctx, x)?;
        ctx.tape.broadcast_mul(x, w)
    }
}

impl<T: Scalar> Module<T> for TripletAttentionState<T> {
    fn forward(&self, ctx: &mut Context<T>, x: Var) -> Result<Var> {
        let mut branches = Vec::with_capacity(3);
        if let Some(g) = &self.gate_cw {
            branches.push(self.rotated_branch(ctx, x, Perm::SWAP_CW, g)?);
        }
        if let Some(g) = &self.gate_ch {
            branches.push(self.rotated_branch(ctx, x, Perm::SWAP_CH, g)?);
        }
        if let Some(g) = &self.gate_hw {
            branches.push(self.spatial_branch(ctx, x, g)?);
        }
        let count = branches.len();
        let mut acc = *branches
            .first()
            .ok_or_else(|| Error::Config("triplet attention has no enabled branch".into()))?;
        for &b in &branches[1..] {
            acc = ctx.tape.add(acc, b)?;
        }
        if count == 1 {
            return Ok(acc);
        }
        ctx.tape.scale(acc, T::one() / T::from_usize_lossy(count))
    }

    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor4<T>)) {
        for g in self.gates() {
            g.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor4<T>)) {
        for g in [&mut self.gate_cw, &mut self.gate_ch, &mut self.gate_hw].into_iter().flatten() {
            g.visit_mut(f);
        }
    }
}
