//! Plain fully-connected stacks on top of the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Model, Tape, Var};
use crate::array::Array;
use crate::error::{Error, Result};

/// A dense layer `y = x·wᵀ + b`, weight stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array,
    pub bias: Array,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array::zeros(&[outputs, inputs]), bias: Array::zeros(&[outputs]) }
    }

    /// He-normal weights, zero bias.
    pub fn he_normal(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("finite std");
        let w = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Array::new(vec![outputs, inputs], w).expect("shape"),
            bias: Array::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Dense layers with rectifiers between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Parameter name of layer `i`'s weight or bias.
    pub fn param_name(i: usize, bias: bool) -> String {
        format!("fc{i}.{}", if bias { "b" } else { "w" })
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        let (layer, kind) = name.strip_prefix("fc")?.split_once('.')?;
        let l = self.layers.get_mut(layer.parse::<usize>().ok()?)?;
        match kind {
            "w" => Some(&mut l.weight),
            "b" => Some(&mut l.bias),
            _ => None,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Array)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(Self::param_name(i, false), &l.weight), (Self::param_name(i, true), &l.bias)])
            .collect()
    }
}

impl Model for Mlp {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if let (Some(first), &[_, width]) = (self.layers.first(), tape.value(x).shape()) {
            if width != first.inputs() {
                return Err(Error::Shape(format!("input width {width}, expected {}", first.inputs())));
            }
        }
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&Self::param_name(i, false), &layer.weight)?;
            let b = tape.param(&Self::param_name(i, true), &layer.bias)?;
            h = tape.linear(h, w)?;
            h = tape.add_bias(h, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}
