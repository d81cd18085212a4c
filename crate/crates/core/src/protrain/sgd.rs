//! Stochastic gradient descent with momentum and weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::nn::Mlp;
use crate::autodiff::GradientSet;
use crate::dynet::SharedWeights;
use crate::error::{Error, Result};

/// Mutable access to a named parameter collection.
pub trait Params {
    fn param_names(&self) -> Vec<String>;
    fn param_array_mut(&mut self, name: &str) -> Option<&mut Array>;
}

impl Params for SharedWeights {
    fn param_names(&self) -> Vec<String> {
        self.params().keys().cloned().collect()
    }

    fn param_array_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.param_mut(name)
    }
}

impl Params for Mlp {
    fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    fn param_array_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.param_mut(name)
    }
}

/// Which entries weight decay reaches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayScope {
    /// Only entries read by the current step's subnets.
    #[default]
    Active,
    /// Every entry of every parameter.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdOptions {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_scope: DecayScope,
}

/// Momentum buffers, one per parameter, created on first touch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Array>,
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v` on every entry a gradient is
/// active for. Inactive entries keep both their value and their velocity,
/// unless decay reaches them ([`DecayScope::All`]), in which case they take
/// the same update with a zero gradient.
pub fn sgd_step(params: &mut dyn Params, grads: &GradientSet, state: &mut SgdState, opt: &SgdOptions) -> Result<()> {
    for name in params.param_names() {
        let p = params.param_array_mut(&name).expect("listed parameter exists");
        let g = grads.param(&name);
        if g.is_none() && opt.decay_scope == DecayScope::Active {
            continue;
        }
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("{name}: gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
        let v = state.velocity.entry(name.clone()).or_insert_with(|| Array::zeros(p.shape()));
        if v.shape() != p.shape() {
            return Err(Error::Shape(format!("{name}: velocity {:?} for parameter {:?}", v.shape(), p.shape())));
        }
        let mask = grads.active_mask(&name);
        let gd = g.map(Array::data);
        for (i, (pi, vi)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let active = gd.is_some() && mask.is_none_or(|m| m[i]);
            if !active && opt.decay_scope == DecayScope::Active {
                continue;
            }
            let gi = if active { gd.map_or(0.0, |d| d[i]) } else { 0.0 };
            *vi = opt.momentum * *vi + gi + opt.weight_decay * *pi;
            *pi -= opt.lr * *vi;
        }
    }
    Ok(())
}
