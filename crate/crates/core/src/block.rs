//! The two composite modules of the network: the feature pyramid encoding
//! (FPE) block and the mutual embedding upsample (MEU) module.

use crate::error::{Axis, OpError};
use crate::graph::{GraphBuilder, LayerGraph, NodeId, Recorded};
use crate::ops::{BnMode, ConvSpec};
use crate::tensor::{Element, Tensor};

/// Configuration of one FPE block.
///
/// The block expands channels by `expansion`, splits the expanded map into
/// `branches` equal subsets, runs a 3x3 depthwise dilated convolution per
/// subset (padding = dilation), concatenates, and projects back down with a
/// linear 1x1 convolution. A residual connection is active iff stride is 1
/// and the channel count is preserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FpeConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Expansion ratio k.
    pub expansion: usize,
    /// Number of pyramid branches: 1, 2 or 4.
    pub branches: usize,
    /// Per-branch dilation rates, strictly increasing.
    pub dilations: Vec<usize>,
    pub stride: usize,
    /// Add each branch output into the next branch's input subset.
    pub inter_branch_add: bool,
}

/// Default dilation ladder: powers of two, one per branch.
pub fn default_dilations(branches: usize) -> Vec<usize> {
    (0..branches).map(|i| 1 << i).collect()
}

impl FpeConfig {
    pub fn validate(&self) -> Result<(), OpError> {
        if self.in_channels == 0 || self.out_channels == 0 || self.expansion == 0 {
            return Err(OpError::Config("fpe: channel counts and expansion must be positive".into()));
        }
        if !matches!(self.branches, 1 | 2 | 4) {
            return Err(OpError::Config(format!("fpe: branches must be 1, 2 or 4, got {}", self.branches)));
        }
        if self.dilations.len() != self.branches {
            return Err(OpError::Config(format!(
                "fpe: {} dilation rates for {} branches",
                self.dilations.len(),
                self.branches
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OpError::Config("fpe: dilations must be positive and strictly increasing".into()));
        }
        if (self.expansion * self.in_channels) % self.branches != 0 {
            return Err(OpError::Config(format!(
                "fpe: expanded channel count {} not divisible by {} branches",
                self.expansion * self.in_channels,
                self.branches
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(OpError::Config(format!("fpe: stride must be 1 or 2, got {}", self.stride)));
        }
        Ok(())
    }

    pub fn expanded_channels(&self) -> usize {
        self.expansion * self.in_channels
    }

    pub fn residual_active(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    /// Inter-branch additions only apply at stride 1: a strided branch output
    /// lives at half resolution and cannot be added to a full-resolution
    /// subset, so downsampling blocks run their pyramid in parallel.
    pub fn cascade_active(&self) -> bool {
        self.inter_branch_add && self.stride == 1
    }
}

/// Per-branch single-convolution receptive field: a 3x3 kernel at rate d
/// spans 2d+1 pixels. Returns (branch number, rf) pairs, 1-indexed.
pub fn fpe_receptive_field(cfg: &FpeConfig) -> Vec<(usize, usize)> {
    cfg.dilations.iter().enumerate().map(|(i, &d)| (i + 1, 2 * d + 1)).collect()
}

/// Append one FPE block to `b`, rooted at `input`. Parameter names are
/// prefixed `{prefix}.`; returns the block output node.
pub fn emit_fpe<E: Element>(
    b: &mut GraphBuilder<E>,
    input: NodeId,
    cfg: &FpeConfig,
    prefix: &str,
) -> Result<NodeId, OpError> {
    cfg.validate()?;
    let in_shape = b.shape(input);
    in_shape.check_axis("fpe input", Axis::Channel, cfg.in_channels)?;

    let expanded = cfg.expanded_channels();
    let x = b.conv(
        &format!("{prefix}.expand"),
        input,
        ConvSpec::pointwise(cfg.in_channels, expanded, false),
    )?;
    let x = b.batch_norm(&format!("{prefix}.expand.bn"), x);
    let x = b.relu(&format!("{prefix}.expand.relu"), x);

    let subsets = b.split(&format!("{prefix}.split"), x, cfg.branches)?;
    let sub_channels = expanded / cfg.branches;

    let mut branch_outputs = Vec::with_capacity(cfg.branches);
    let mut prev: Option<NodeId> = None;
    for (i, &subset) in subsets.iter().enumerate() {
        let branch = i + 1;
        let mut branch_in = subset;
        if let (true, Some(p)) = (cfg.cascade_active(), prev) {
            branch_in = b.add_cascade(&format!("{prefix}.branch{branch}.csum"), subset, p)?;
        }
        let y = b.conv(
            &format!("{prefix}.branch{branch}.conv"),
            branch_in,
            ConvSpec::depthwise3(sub_channels, cfg.stride, cfg.dilations[i]),
        )?;
        let y = b.batch_norm(&format!("{prefix}.branch{branch}.bn"), y);
        let y = b.relu(&format!("{prefix}.branch{branch}.relu"), y);
        branch_outputs.push(y);
        prev = Some(y);
    }

    let cat = if branch_outputs.len() == 1 {
        branch_outputs[0]
    } else {
        b.concat(&format!("{prefix}.concat"), &branch_outputs)?
    };
    let y = b.conv(
        &format!("{prefix}.project"),
        cat,
        ConvSpec::pointwise(expanded, cfg.out_channels, false),
    )?;
    let y = b.batch_norm(&format!("{prefix}.project.bn"), y);

    if cfg.residual_active() {
        b.add(&format!("{prefix}.residual"), y, input)
    } else {
        Ok(y)
    }
}

/// Configuration of one MEU decoder module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MeuConfig {
    pub high_channels: usize,
    pub low_channels: usize,
    pub out_channels: usize,
    pub channel_attention: bool,
    pub spatial_attention: bool,
}

impl MeuConfig {
    pub fn validate(&self) -> Result<(), OpError> {
        if self.high_channels == 0 || self.low_channels == 0 || self.out_channels == 0 {
            return Err(OpError::Config("meu: channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Append one MEU module. `high` must have exactly half the spatial extent of
/// `low` on both axes. Both inputs are projected to `out_channels`; the
/// channel-attention vector from the high road gates the low road, the
/// spatial-attention map from the low road gates the upsampled high road, and
/// the two weighted maps are fused by addition.
pub fn emit_meu<E: Element>(
    b: &mut GraphBuilder<E>,
    high: NodeId,
    low: NodeId,
    cfg: &MeuConfig,
    prefix: &str,
) -> Result<NodeId, OpError> {
    cfg.validate()?;
    let hs = b.shape(high);
    let ls = b.shape(low);
    hs.check_axis("meu high input", Axis::Channel, cfg.high_channels)?;
    ls.check_axis("meu low input", Axis::Channel, cfg.low_channels)?;
    ls.check_axis("meu low input", Axis::Height, hs.h * 2)?;
    ls.check_axis("meu low input", Axis::Width, hs.w * 2)?;

    // Feature-producing projections carry BN; the attention convolutions
    // below produce gates and carry a bias instead.
    let hp = b.conv(
        &format!("{prefix}.high"),
        high,
        ConvSpec::pointwise(cfg.high_channels, cfg.out_channels, false),
    )?;
    let hp = b.batch_norm(&format!("{prefix}.high.bn"), hp);
    let lp = b.conv(
        &format!("{prefix}.low"),
        low,
        ConvSpec::pointwise(cfg.low_channels, cfg.out_channels, false),
    )?;
    let lp = b.batch_norm(&format!("{prefix}.low.bn"), lp);

    let weighted_low = if cfg.channel_attention {
        let pooled = b.global_avg_pool(&format!("{prefix}.ca.pool"), hp);
        let gate = b.conv(
            &format!("{prefix}.ca"),
            pooled,
            ConvSpec::pointwise(cfg.out_channels, cfg.out_channels, true),
        )?;
        let gate = b.relu(&format!("{prefix}.ca.relu"), gate);
        b.mul_broadcast(&format!("{prefix}.ca.scale"), lp, gate)?
    } else {
        lp
    };

    let up = b.upsample_x2(&format!("{prefix}.up"), hp);
    let weighted_high = if cfg.spatial_attention {
        let squeezed = b.channel_mean(&format!("{prefix}.sa.pool"), lp);
        let gate = b.conv(&format!("{prefix}.sa"), squeezed, ConvSpec::pointwise(1, 1, true))?;
        let gate = b.relu(&format!("{prefix}.sa.relu"), gate);
        b.mul_broadcast(&format!("{prefix}.sa.scale"), up, gate)?
    } else {
        up
    };

    b.add(&format!("{prefix}.fuse"), weighted_low, weighted_high)
}

/// A single FPE block as a standalone runnable unit.
pub struct FpeBlock<E: Element = f32> {
    cfg: FpeConfig,
    graph: LayerGraph<E>,
}

impl<E: Element> FpeBlock<E> {
    pub fn new(cfg: FpeConfig, input_hw: (usize, usize), seed: u64) -> Result<Self, OpError> {
        let mut b = GraphBuilder::new(seed);
        let x = b.input(cfg.in_channels, input_hw.0, input_hw.1);
        let y = emit_fpe(&mut b, x, &cfg, "fpe")?;
        Ok(FpeBlock { cfg, graph: b.finish(y) })
    }

    pub fn cfg(&self) -> &FpeConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &LayerGraph<E> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut LayerGraph<E> {
        &mut self.graph
    }

    /// Infer-mode forward (running statistics).
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, OpError> {
        self.graph.forward(&[x])
    }

    pub fn record(&mut self, x: &Tensor<E>, mode: BnMode) -> Result<Recorded<E>, OpError> {
        self.graph.record_forward(&[x], mode, false)
    }
}

/// A single MEU module as a standalone runnable unit.
pub struct MeuModule<E: Element = f32> {
    cfg: MeuConfig,
    graph: LayerGraph<E>,
}

impl<E: Element> MeuModule<E> {
    /// `high_hw` is the high-road spatial extent; the low road is 2x.
    pub fn new(cfg: MeuConfig, high_hw: (usize, usize), seed: u64) -> Result<Self, OpError> {
        let mut b = GraphBuilder::new(seed);
        let high = b.input(cfg.high_channels, high_hw.0, high_hw.1);
        let low = b.input(cfg.low_channels, high_hw.0 * 2, high_hw.1 * 2);
        let y = emit_meu(&mut b, high, low, &cfg, "meu")?;
        Ok(MeuModule { cfg, graph: b.finish(y) })
    }

    pub fn cfg(&self) -> &MeuConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &LayerGraph<E> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut LayerGraph<E> {
        &mut self.graph
    }

    pub fn forward(&self, high: &Tensor<E>, low: &Tensor<E>) -> Result<Tensor<E>, OpError> {
        self.graph.forward(&[high, low])
    }

    pub fn record(&mut self, high: &Tensor<E>, low: &Tensor<E>, mode: BnMode) -> Result<Recorded<E>, OpError> {
        self.graph.record_forward(&[high, low], mode, false)
    }
}
