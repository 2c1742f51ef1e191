//! The Tiny Shared Block: one square 1×1 convolution shared by every
//! insertion point and every channel group of the network.
//!
//! A feature map with `C` channels is split into `N = ceil(C / C_TSB)`
//! consecutive groups of `C_TSB` channels; the last group is zero-padded.
//! Every group goes through the same block and the padding is dropped
//! afterwards, so the output has the input's shape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_DEPTH: usize = 4;

/// `ceil(c / c_tsb)`.
pub fn group_count(c: usize, c_tsb: usize) -> usize {
    c.div_ceil(c_tsb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grouping {
    pub channels: usize,
    pub groups: usize,
    pub pad: usize,
}

impl Grouping {
    pub fn new(channels: usize, c_tsb: usize) -> Result<Self> {
        if channels == 0 || c_tsb == 0 {
            return Err(Error::config("grouping needs positive channel counts"));
        }
        let groups = group_count(channels, c_tsb);
        Ok(Grouping {
            channels,
            groups,
            pad: groups * c_tsb - channels,
        })
    }

    pub fn padded_channels(&self) -> usize {
        self.channels + self.pad
    }
}

/// The shared block: `depth` stacked `C_TSB×C_TSB` 1×1 convolutions without
/// bias or nonlinearity in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsbBlock {
    channels: usize,
    layers: Vec<Tensor>,
}

impl TsbBlock {
    /// Identity-initialized block of the given depth.
    pub fn build_multilayer(channels: usize, depth: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("TSB channel capacity must be positive"));
        }
        if !(1..=MAX_DEPTH).contains(&depth) {
            return Err(Error::config(format!(
                "TSB depth must be in 1..={MAX_DEPTH}, got {depth}"
            )));
        }
        let mut block = TsbBlock {
            channels,
            layers: vec![Tensor::zeros(&[channels, channels, 1, 1]); depth],
        };
        block.init_identity();
        Ok(block)
    }

    pub fn identity(channels: usize) -> Result<Self> {
        Self::build_multilayer(channels, 1)
    }

    pub fn from_layers(layers: Vec<Tensor>) -> Result<Self> {
        let channels = layers
            .first()
            .map(|t| t.shape()[0])
            .ok_or_else(|| Error::config("TSB needs at least one layer"))?;
        if layers.len() > MAX_DEPTH || layers.iter().any(|t| t.shape() != [channels, channels, 1, 1]) {
            return Err(Error::config("TSB layers must all be [C, C, 1, 1]"));
        }
        Ok(TsbBlock { channels, layers })
    }

    /// Resets every layer to the identity mapping.
    pub fn init_identity(&mut self) {
        for layer in &mut self.layers {
            *layer = Tensor::eye(self.channels, 2);
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }

    pub fn param_count(&self) -> usize {
        self.depth() * self.channels * self.channels
    }

    /// Applies the block to a `[N, C, H, W]` feature map outside any training graph.
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.input(v.clone());
        let ws: Vec<Var> = self.layers.iter().map(|w| g.input(w.clone())).collect();
        let out = apply_in_graph(&mut g, x, &ws)?;
        Ok(g.take_value(out))
    }
}

/// Records the block application on `v` using the given (shared) layer weights.
pub fn apply_in_graph(g: &mut Graph, v: Var, layers: &[Var]) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::config(format!("TSB expects [N, C, H, W], got {shape:?}")));
    }
    let t = layers
        .first()
        .map(|w| g.value(*w).shape()[0])
        .ok_or_else(|| Error::config("TSB needs at least one layer"))?;
    let grouping = Grouping::new(shape[1], t)?;
    let mut x = g.channel_pad(v, grouping.padded_channels())?;
    for &w in layers {
        x = g.grouped_1x1(x, w)?;
    }
    g.channel_crop(x, grouping.channels)
}

/// Backbone layer indices after which the block is applied. Each index must
/// name a convolution layer; the block then sits between the convolution
/// output and whatever normalization or nonlinearity follows.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub positions: Vec<usize>,
}

impl InsertionPlan {
    pub fn new(mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        positions.dedup();
        InsertionPlan { positions }
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.positions.binary_search(&layer).is_ok()
    }

    /// Keeps the first `count` positions.
    pub fn truncated(&self, count: usize) -> Self {
        InsertionPlan {
            positions: self.positions.iter().copied().take(count).collect(),
        }
    }
}
