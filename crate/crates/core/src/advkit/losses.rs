//! Robust training objectives.

use serde::{Deserialize, Serialize};

use super::attack::{attack, AttackSpec, Objective};
use crate::array::Array;
use crate::autodiff::{infer, Model, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Where distillation targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// The largest subnet of the shared store as it is at each step.
    LiveLargest,
    /// A copy of the store taken when distillation starts.
    #[default]
    FrozenSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    pub alpha: f64,
    #[serde(default)]
    pub teacher_mode: TeacherMode,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self { alpha: 0.9, teacher_mode: TeacherMode::default() }
    }
}

impl DistillSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Handles to the pieces of a recorded TRADES objective.
#[derive(Clone, Copy, Debug)]
pub struct TradesLoss {
    pub loss: Var,
    pub natural: Var,
    pub robust: Var,
}

/// `CE(net(x), y) + β·KL(net(x) ‖ net(x_adv))`, with `x_adv` maximizing the
/// KL term by `inner`. The attack runs first on its own tape; both forward
/// passes of the objective are recorded on `tape`.
pub fn trades_loss(
    net: &dyn Model,
    tape: &mut Tape,
    x: &Array,
    y: &[usize],
    beta: f64,
    inner: &AttackSpec,
    rng: &mut Rng,
) -> Result<TradesLoss> {
    if !(beta >= 0.0) {
        return Err(Error::Invalid(format!("beta {beta} must be non-negative")));
    }
    let clean = infer(net, x)?;
    let x_adv = attack(net, x, Objective::KlFrom(&clean), inner, rng)?;
    let xv = tape.constant(x.clone())?;
    let z = net.forward(tape, xv)?;
    let natural = tape.cross_entropy(z, y)?;
    let xa = tape.constant(x_adv)?;
    let za = net.forward(tape, xa)?;
    let robust = tape.kl_div(z, za)?;
    let weighted = tape.scale(robust, beta)?;
    let loss = tape.add(natural, weighted)?;
    Ok(TradesLoss { loss, natural, robust })
}

/// Handles to the recorded distillation objective.
#[derive(Clone, Copy, Debug)]
pub struct DistillLoss {
    pub loss: Var,
    pub natural: Var,
    pub robust: Var,
}

/// Outer distillation objective on recorded student logits:
/// `(1−α)·KL(S(x) ‖ T(x)) + α·KL(S(x_adv) ‖ T(x))`.
pub fn rslad_outer(tape: &mut Tape, s_clean: Var, s_adv: Var, teacher: &Array, alpha: f64) -> Result<DistillLoss> {
    let ts = tape.value(s_clean).shape();
    if ts != teacher.shape() || tape.value(s_adv).shape() != teacher.shape() {
        return Err(Error::Shape(format!("student logits {ts:?} vs teacher {:?}", teacher.shape())));
    }
    let t = tape.constant(teacher.clone())?;
    let natural = tape.kl_div(s_clean, t)?;
    let robust = tape.kl_div(s_adv, t)?;
    let a = tape.scale(natural, 1.0 - alpha)?;
    let b = tape.scale(robust, alpha)?;
    let loss = tape.add(a, b)?;
    Ok(DistillLoss { loss, natural, robust })
}

/// The inner objective: `KL(S(x') ‖ T(x))`, maximized over `x'` by the attack.
pub fn rslad_inner(teacher: &Array) -> Objective<'_> {
    Objective::KlTo(teacher)
}

/// Full distillation step for one student: attack on the inner objective,
/// then record the outer objective on `tape`.
pub fn rslad_losses(
    student: &dyn Model,
    tape: &mut Tape,
    x: &Array,
    teacher: &Array,
    spec: &DistillSpec,
    inner: &AttackSpec,
    rng: &mut Rng,
) -> Result<DistillLoss> {
    spec.validate()?;
    let x_adv = attack(student, x, rslad_inner(teacher), inner, rng)?;
    let xv = tape.constant(x.clone())?;
    let s = student.forward(tape, xv)?;
    let xa = tape.constant(x_adv)?;
    let sa = student.forward(tape, xa)?;
    rslad_outer(tape, s, sa, teacher, spec.alpha)
}
