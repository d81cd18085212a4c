//! Adversarial examples, robust objectives and robustness evaluation.

mod attack;
mod eval;
mod losses;

pub use attack::{attack, fgsm, input_gradient, pgd, Attack, AttackRegistry, AttackSpec, Fgsm, Objective, Pgd};
pub use eval::{evaluate, predictions, EvalResult};
pub use losses::{rslad_inner, rslad_losses, rslad_outer, trades_loss, DistillLoss, DistillSpec, TeacherMode, TradesLoss};
