//! Training hyperparameters, phase plans and sampling schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sgd::{DecayScope, SgdOptions};
use crate::dynet::{all_dims, Dim, DimSet, SearchSpace};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` every `every` epochs of a stage.
    Step { every: usize, gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub decay_scope: DecayScope,
}

mod defaults {
    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        2e-4
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn schedule() -> super::LrSchedule {
        super::LrSchedule::Constant
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            batch_size: defaults::batch_size(),
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            decay_scope: DecayScope::Active,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && match self.lr_schedule {
                LrSchedule::Constant => true,
                LrSchedule::Step { every, gamma } => every >= 1 && gamma > 0.0,
            };
        if !ok {
            return Err(Error::Invalid(format!("hyperparameters out of range: {self:?}")));
        }
        Ok(())
    }

    /// Learning rate for epoch `epoch` of the current stage.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step { every, gamma } => self.lr * gamma.powi((epoch / every) as i32),
        }
    }

    pub fn sgd(&self, epoch: usize) -> SgdOptions {
        SgdOptions { lr: self.lr_at(epoch), momentum: self.momentum, weight_decay: self.weight_decay, decay_scope: self.decay_scope }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub free_dims: DimSet,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub teacher_epochs: usize,
    pub phases: Vec<Phase>,
    /// Students sampled per optimizer step.
    #[serde(default = "one")]
    pub n_sub: usize,
}

fn one() -> usize {
    1
}

impl PhasePlan {
    /// Three phases freeing width (kernel in spaces without elastic width),
    /// then depth, then expansion.
    pub fn standard(space: &SearchSpace, teacher_epochs: usize, phase_epochs: usize) -> Self {
        let elastic_width = space.stages.iter().any(|s| s.width_choices.len() > 1);
        let first = if elastic_width || !space.has_dim(Dim::Kernel) { Dim::Width } else { Dim::Kernel };
        let p1: DimSet = [first].into();
        let mut p2 = p1.clone();
        p2.insert(Dim::Depth);
        let mut p3 = p2.clone();
        p3.insert(Dim::Expansion);
        let phase = |name: &str, free_dims| Phase { name: name.into(), free_dims, epochs: phase_epochs };
        Self {
            teacher_epochs,
            phases: vec![phase("phase1", p1), phase("phase2", p2), phase("phase3", p3)],
            n_sub: 1,
        }
    }

    /// 300 teacher epochs, 120 per phase.
    pub fn full_scale(space: &SearchSpace) -> Self {
        Self::standard(space, 300, 120)
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.n_sub < 1 {
            return Err(Error::Invalid("n_sub must be at least 1".into()));
        }
        for p in &self.phases {
            if p.free_dims.is_empty() {
                return Err(Error::Invalid(format!("phase {} frees no dimension", p.name)));
            }
            if let Some(d) = p.free_dims.iter().find(|&&d| !space.has_dim(d)) {
                return Err(Error::Invalid(format!("phase {} frees {d:?}, absent from the space", p.name)));
            }
        }
        for w in self.phases.windows(2) {
            if !(w[0].free_dims.is_subset(&w[1].free_dims) && w[0].free_dims.len() < w[1].free_dims.len()) {
                return Err(Error::Invalid(format!("free dimensions must strictly grow from {} to {}", w[0].name, w[1].name)));
            }
        }
        Ok(())
    }

    pub fn distill_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

/// One block of training epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    /// Adversarial training of the largest configuration.
    Teacher { epochs: usize },
    /// Distillation into sampled subnets.
    Distill { name: String, free_dims: DimSet, epochs: usize, n_sub: usize },
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Teacher { .. } => "teacher",
            Stage::Distill { name, .. } => name,
        }
    }

    pub fn epochs(&self) -> usize {
        match self {
            Stage::Teacher { epochs } | Stage::Distill { epochs, .. } => *epochs,
        }
    }
}

/// How subnets are drawn during distillation.
pub trait SamplingSchedule: Send + Sync {
    fn name(&self) -> &'static str;
    /// Distillation stages realizing `plan` in `space`.
    fn stages(&self, plan: &PhasePlan, space: &SearchSpace) -> Vec<Stage>;
}

/// The plan's phases in order.
pub struct Progressive;

impl SamplingSchedule for Progressive {
    fn name(&self) -> &'static str {
        "progressive"
    }

    fn stages(&self, plan: &PhasePlan, _space: &SearchSpace) -> Vec<Stage> {
        plan.phases
            .iter()
            .map(|p| Stage::Distill { name: p.name.clone(), free_dims: p.free_dims.clone(), epochs: p.epochs, n_sub: plan.n_sub })
            .collect()
    }
}

/// Every dimension free from the start, for the plan's whole budget.
pub struct RandomSampling;

impl SamplingSchedule for RandomSampling {
    fn name(&self) -> &'static str {
        "random"
    }

    fn stages(&self, plan: &PhasePlan, space: &SearchSpace) -> Vec<Stage> {
        let free_dims = all_dims().into_iter().filter(|&d| space.has_dim(d)).collect();
        vec![Stage::Distill { name: "random".into(), free_dims, epochs: plan.distill_epochs(), n_sub: plan.n_sub }]
    }
}

pub struct ScheduleRegistry {
    schedules: BTreeMap<&'static str, Box<dyn SamplingSchedule>>,
}

impl Default for ScheduleRegistry {
    fn default() -> Self {
        let mut r = Self { schedules: BTreeMap::new() };
        r.register(Box::new(Progressive));
        r.register(Box::new(RandomSampling));
        r
    }
}

impl ScheduleRegistry {
    pub fn register(&mut self, s: Box<dyn SamplingSchedule>) {
        self.schedules.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SamplingSchedule> {
        self.schedules.get(name).map(|s| s.as_ref()).ok_or_else(|| {
            Error::Invalid(format!("unknown schedule {name:?}; known: {:?}", self.schedules.keys().collect::<Vec<_>>()))
        })
    }
}
