//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is built by running a model forward; [`Tape::backward`] then
//! produces a [`GradientSet`] holding full-shape gradients for every named
//! parameter and for inputs recorded with `requires_grad`.

pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, Primitive};
pub use tape::{GradientSet, Moments, Tape, Var, KL_PROB_FLOOR};

use crate::array::Array;
use crate::error::Result;

/// Anything that maps an input batch to logits on a tape.
pub trait Model {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl<M: Model + ?Sized> Model for &M {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        (**self).forward(tape, x)
    }
}

/// Runs `model` on `input` over a fresh tape and returns the output handle
/// together with the tape.
pub fn forward(model: &dyn Model, input: &Array, input_grad: bool) -> Result<(Var, Tape)> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone(), input_grad)?;
    let y = model.forward(&mut tape, x)?;
    Ok((y, tape))
}

/// Evaluates `model` without recording parameter gradients and returns the logits.
pub fn infer(model: &dyn Model, input: &Array) -> Result<Array> {
    let mut tape = Tape::without_param_grads();
    let x = tape.input(input.clone(), false)?;
    let y = model.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// `KL(softmax(p) ‖ softmax(q))` averaged over rows, without gradients.
pub fn kl_divergence(p_logits: &Array, q_logits: &Array) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(p_logits.clone())?;
    let q = tape.constant(q_logits.clone())?;
    let k = tape.kl_div(p, q)?;
    Ok(tape.value(k).item())
}

/// Mean cross-entropy of `labels` under softmax(`logits`), without gradients.
pub fn cross_entropy(logits: &Array, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone())?;
    let l = tape.cross_entropy(z, labels)?;
    Ok(tape.value(l).item())
}
