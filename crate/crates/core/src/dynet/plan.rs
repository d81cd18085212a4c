//! Resolved per-block geometry of one configuration.

use super::space::{scaled_channels, ArchConfig, SearchSpace};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub stage: usize,
    pub block: usize,
    pub cin: usize,
    pub mid: usize,
    pub cout: usize,
    pub kernel: usize,
    pub max_kernel: usize,
    pub stride: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// The first block of each stage carries a strided 1×1 projection
    /// shortcut; later blocks add their input channel-aligned.
    pub projection: bool,
}

impl BlockPlan {
    pub fn prefix(&self) -> String {
        block_prefix(self.stage, self.block)
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("s{stage}.b{block}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetPlan {
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub blocks: Vec<BlockPlan>,
    pub head_in: usize,
    pub classes: usize,
}

fn strided(hw: (usize, usize), stride: usize) -> (usize, usize) {
    ((hw.0 - 1) / stride + 1, (hw.1 - 1) / stride + 1)
}

/// Channel counts kept by `config`: `⌈w·C⌉` outputs and `⌈e·C⌉` middle
/// channels per block; depth keeps the leading blocks of each stage.
pub fn plan(space: &SearchSpace, config: &ArchConfig) -> Result<NetPlan> {
    plan_at(space, config, space.input)
}

/// [`plan`] for inputs of shape `input` instead of the space's own.
pub fn plan_at(space: &SearchSpace, config: &ArchConfig, input: [usize; 3]) -> Result<NetPlan> {
    space.check_config(config)?;
    if input.contains(&0) {
        return Err(Error::Shape(format!("input shape {input:?}")));
    }
    let mut hw = (input[1], input[2]);
    let mut cin = space.stem.channels;
    let mut blocks = Vec::new();
    for (si, (spec, sc)) in space.stages.iter().zip(&config.stages).enumerate() {
        for (bi, layer) in sc.layers.iter().enumerate() {
            let stride = if bi == 0 { spec.stride } else { 1 };
            let out_hw = strided(hw, stride);
            let cout = scaled_channels(layer.width, spec.channels);
            blocks.push(BlockPlan {
                stage: si,
                block: bi,
                cin,
                mid: scaled_channels(layer.expansion, spec.channels),
                cout,
                kernel: layer.kernel,
                max_kernel: spec.max_kernel(),
                stride,
                in_hw: hw,
                out_hw,
                projection: bi == 0,
            });
            hw = out_hw;
            cin = cout;
        }
    }
    Ok(NetPlan {
        input,
        stem_channels: space.stem.channels,
        stem_kernel: space.stem.kernel,
        blocks,
        head_in: cin,
        classes: space.classes,
    })
}
