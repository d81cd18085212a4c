//! Natural and white-box robust accuracy.

use serde::{Deserialize, Serialize};

use super::attack::{AttackRegistry, AttackSpec, Objective};
use crate::array::Array;
use crate::autodiff::{infer, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub natural: f64,
    /// `(attack label, accuracy)` in the order the attacks were given.
    pub robust: Vec<(String, f64)>,
    pub count: usize,
}

impl EvalResult {
    pub fn robust_of(&self, label: &str) -> Option<f64> {
        self.robust.iter().find(|(l, _)| l == label).map(|(_, a)| *a)
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predictions(logits: &Array) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn correct(net: &dyn Model, x: &Array, y: &[usize]) -> Result<usize> {
    Ok(predictions(&infer(net, x)?).iter().zip(y).filter(|(p, l)| p == l).count())
}

/// Accuracy on clean inputs and on inputs attacked against `net` itself,
/// each attack maximizing cross-entropy of the true labels.
pub fn evaluate(
    net: &dyn Model,
    data: &Dataset,
    attacks: &[AttackSpec],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let registry = AttackRegistry::default();
    let runners = attacks.iter().map(|a| registry.get(&a.method)).collect::<Result<Vec<_>>>()?;
    let mut nat = 0;
    let mut rob = vec![0; attacks.len()];
    for idx in data.sequential_batches(batch_size) {
        let (x, y) = data.batch(&idx)?;
        nat += correct(net, &x, &y)?;
        for ((spec, runner), r) in attacks.iter().zip(&runners).zip(rob.iter_mut()) {
            let xa = runner.run(net, &x, Objective::CrossEntropy(&y), spec, rng)?;
            *r += correct(net, &xa, &y)?;
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        natural: nat as f64 / n,
        robust: attacks.iter().zip(rob).map(|(a, r)| (a.label(), r as f64 / n)).collect(),
        count: data.len(),
    })
}
