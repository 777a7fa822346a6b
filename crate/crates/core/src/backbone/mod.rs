//! Desk-scale CNN backbones with one attention module per block.

pub mod arch;
pub mod network;

pub use arch::{ArchSpec, BlockType, StageSpec};
pub use network::{input_batch_shape, layer_seed, Block, BlockBody, ConvBn, Network, Stem};
