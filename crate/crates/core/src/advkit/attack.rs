//! L∞ attacks behind a common trait, looked up by name.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::autodiff::{Model, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Perturbation contract of an L∞ attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Registered attack name: `fgsm` or `pgd`.
    pub method: String,
    pub eps: f64,
    #[serde(default = "one")]
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "unit_interval")]
    pub clamp: (f64, f64),
}

fn one() -> usize {
    1
}

fn unit_interval() -> (f64, f64) {
    (0.0, 1.0)
}

impl AttackSpec {
    pub fn fgsm(eps: f64) -> Self {
        Self { method: "fgsm".into(), eps, steps: 1, step_size: eps.max(f64::MIN_POSITIVE), random_start: false, clamp: unit_interval() }
    }

    pub fn pgd(eps: f64, steps: usize, step_size: f64, random_start: bool) -> Self {
        Self { method: "pgd".into(), eps, steps, step_size, random_start, clamp: unit_interval() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || self.steps < 1 || !(self.step_size > 0.0) || !(self.clamp.0 < self.clamp.1) {
            return Err(Error::Invalid(format!(
                "attack needs eps ≥ 0, steps ≥ 1, step_size > 0 and lo < hi (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Short display name, e.g. `fgsm` or `pgd20`.
    pub fn label(&self) -> String {
        if self.method == "pgd" {
            format!("pgd{}", self.steps)
        } else {
            self.method.clone()
        }
    }
}

/// What an attack maximizes.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Cross-entropy of the true labels.
    CrossEntropy(&'a [usize]),
    /// `KL(softmax(target) ‖ softmax(net(x')))`.
    KlFrom(&'a Array),
    /// `KL(softmax(net(x')) ‖ softmax(target))`.
    KlTo(&'a Array),
}

/// Objective value and its gradient with respect to the input batch.
pub fn input_gradient(net: &dyn Model, x: &Array, objective: Objective) -> Result<(f64, Array)> {
    let mut tape = Tape::without_param_grads();
    let xv = tape.input(x.clone(), true)?;
    let z = net.forward(&mut tape, xv)?;
    let loss = match objective {
        Objective::CrossEntropy(labels) => tape.cross_entropy(z, labels)?,
        Objective::KlFrom(target) => {
            let t = tape.constant(target.clone())?;
            tape.kl_div(t, z)?
        }
        Objective::KlTo(target) => {
            let t = tape.constant(target.clone())?;
            tape.kl_div(z, t)?
        }
    };
    let value = tape.value(loss).item();
    let grads = tape.backward_scalar(loss)?;
    let g = grads.input(xv).cloned().unwrap_or_else(|| Array::zeros(x.shape()));
    if !g.is_finite() {
        return Err(Error::NonFinite("input gradient".into()));
    }
    Ok((value, g))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `v` onto the ε-ball around `o` and the clamp box, nudging by
/// single ulps so that `|v - o| <= eps` holds after rounding as well.
fn project(v: f64, o: f64, eps: f64, (lo, hi): (f64, f64)) -> f64 {
    let mut p = v.min(o + eps).max(o - eps).clamp(lo, hi);
    while p - o > eps {
        p = p.next_down();
    }
    while o - p > eps {
        p = p.next_up();
    }
    p
}

fn check_domain(x: &Array, spec: &AttackSpec) -> Result<()> {
    spec.validate()?;
    let (lo, hi) = spec.clamp;
    if x.data().iter().any(|v| !(lo..=hi).contains(v)) {
        return Err(Error::Invalid(format!("attack input outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// An adversarial example generator.
pub trait Attack: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, net: &dyn Model, x: &Array, objective: Objective, spec: &AttackSpec, rng: &mut Rng) -> Result<Array>;
}

/// Single signed-gradient step of size ε.
pub struct Fgsm;

impl Attack for Fgsm {
    fn name(&self) -> &'static str {
        "fgsm"
    }

    fn run(&self, net: &dyn Model, x: &Array, objective: Objective, spec: &AttackSpec, _rng: &mut Rng) -> Result<Array> {
        check_domain(x, spec)?;
        if spec.eps == 0.0 {
            return Ok(x.clone());
        }
        let (_, g) = input_gradient(net, x, objective)?;
        let data = x.data().iter().zip(g.data()).map(|(&v, &gi)| project(v + spec.eps * sign(gi), v, spec.eps, spec.clamp)).collect();
        Array::new(x.shape().to_vec(), data)
    }
}

/// Projected signed-gradient ascent inside the ε-ball and the clamp box.
pub struct Pgd;

impl Attack for Pgd {
    fn name(&self) -> &'static str {
        "pgd"
    }

    fn run(&self, net: &dyn Model, x0: &Array, objective: Objective, spec: &AttackSpec, rng: &mut Rng) -> Result<Array> {
        check_domain(x0, spec)?;
        let eps = spec.eps;
        let mut x = x0.clone();
        if spec.random_start && eps > 0.0 {
            for (v, &o) in x.data_mut().iter_mut().zip(x0.data()) {
                *v = project(o + rng.random_range(-eps..=eps), o, eps, spec.clamp);
            }
        }
        for _ in 0..spec.steps {
            let (_, g) = input_gradient(net, &x, objective)?;
            for ((v, &o), &gi) in x.data_mut().iter_mut().zip(x0.data()).zip(g.data()) {
                *v = project(*v + spec.step_size * sign(gi), o, eps, spec.clamp);
            }
        }
        Ok(x)
    }
}

/// Attacks available by name.
pub struct AttackRegistry {
    attacks: BTreeMap<&'static str, Box<dyn Attack>>,
}

impl Default for AttackRegistry {
    fn default() -> Self {
        let mut r = Self { attacks: BTreeMap::new() };
        r.register(Box::new(Fgsm));
        r.register(Box::new(Pgd));
        r
    }
}

impl AttackRegistry {
    pub fn register(&mut self, attack: Box<dyn Attack>) {
        self.attacks.insert(attack.name(), attack);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Attack> {
        self.attacks.get(name).map(|a| a.as_ref()).ok_or_else(|| {
            Error::Invalid(format!("unknown attack {name:?}; known: {:?}", self.attacks.keys().collect::<Vec<_>>()))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.attacks.keys().copied().collect()
    }
}

/// Runs the attack named by `spec.method` from the default registry.
pub fn attack(net: &dyn Model, x: &Array, objective: Objective, spec: &AttackSpec, rng: &mut Rng) -> Result<Array> {
    AttackRegistry::default().get(&spec.method)?.run(net, x, objective, spec, rng)
}

pub fn fgsm(net: &dyn Model, x: &Array, objective: Objective, eps: f64) -> Result<Array> {
    let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
    Fgsm.run(net, x, objective, &AttackSpec::fgsm(eps), &mut rng)
}

pub fn pgd(net: &dyn Model, x: &Array, objective: Objective, spec: &AttackSpec, rng: &mut Rng) -> Result<Array> {
    Pgd.run(net, x, objective, spec, rng)
}
