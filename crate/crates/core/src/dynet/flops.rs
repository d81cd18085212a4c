//! Analytic compute and size accounting.

use serde::{Deserialize, Serialize};

use super::plan::plan_at;
use super::space::{ArchConfig, SearchSpace};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub macs: u64,
    /// Two FLOPs per multiply-accumulate.
    pub flops: u64,
    pub params: u64,
}

impl FlopsReport {
    pub fn mflops(&self) -> f64 {
        self.flops as f64 / 1e6
    }
}

/// A costed layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerCost {
    Dense { inputs: usize, outputs: usize, bias: bool },
    Conv { kernel: usize, cin: usize, cout: usize, out_hw: (usize, usize) },
    /// Affine normalization: learned scale and shift, no MACs.
    Norm { channels: usize },
}

impl LayerCost {
    pub fn macs(&self) -> u64 {
        match *self {
            LayerCost::Dense { inputs, outputs, .. } => (inputs * outputs) as u64,
            LayerCost::Conv { kernel, cin, cout, out_hw } => (kernel * kernel * cin * cout * out_hw.0 * out_hw.1) as u64,
            LayerCost::Norm { .. } => 0,
        }
    }

    pub fn params(&self) -> u64 {
        match *self {
            LayerCost::Dense { inputs, outputs, bias } => (inputs * outputs + if bias { outputs } else { 0 }) as u64,
            LayerCost::Conv { kernel, cin, cout, .. } => (kernel * kernel * cin * cout) as u64,
            LayerCost::Norm { channels } => 2 * channels as u64,
        }
    }
}

pub fn tally(layers: &[LayerCost]) -> FlopsReport {
    let macs = layers.iter().map(LayerCost::macs).sum();
    FlopsReport { macs, flops: 2 * macs, params: layers.iter().map(LayerCost::params).sum() }
}

/// Layers executed by `config` on inputs of shape `input`.
pub fn layer_costs(space: &SearchSpace, config: &ArchConfig, input: [usize; 3]) -> Result<Vec<LayerCost>> {
    let pl = plan_at(space, config, input)?;
    let hw = (input[1], input[2]);
    let mut out = vec![
        LayerCost::Conv { kernel: pl.stem_kernel, cin: input[0], cout: pl.stem_channels, out_hw: hw },
        LayerCost::Norm { channels: pl.stem_channels },
    ];
    for b in &pl.blocks {
        out.push(LayerCost::Conv { kernel: 1, cin: b.cin, cout: b.mid, out_hw: b.in_hw });
        out.push(LayerCost::Norm { channels: b.mid });
        out.push(LayerCost::Conv { kernel: b.kernel, cin: b.mid, cout: b.mid, out_hw: b.out_hw });
        out.push(LayerCost::Norm { channels: b.mid });
        out.push(LayerCost::Conv { kernel: 1, cin: b.mid, cout: b.cout, out_hw: b.out_hw });
        out.push(LayerCost::Norm { channels: b.cout });
        if b.projection {
            out.push(LayerCost::Conv { kernel: 1, cin: b.cin, cout: b.cout, out_hw: b.out_hw });
            out.push(LayerCost::Norm { channels: b.cout });
        }
    }
    out.push(LayerCost::Dense { inputs: pl.head_in, outputs: pl.classes, bias: true });
    Ok(out)
}

pub fn count_flops(space: &SearchSpace, config: &ArchConfig, input: [usize; 3]) -> Result<FlopsReport> {
    Ok(tally(&layer_costs(space, config, input)?))
}
