//! Teacher pretraining, progressive and random-sampling distillation, and
//! the optimizer.

mod plan;
mod sgd;
mod trainer;

pub use crate::data::Dataset;
pub use plan::{
    Hyperparams, LrSchedule, Phase, PhasePlan, Progressive, RandomSampling, SamplingSchedule, ScheduleRegistry, Stage,
};
pub use sgd::{sgd_step, DecayScope, Params, SgdOptions, SgdState};
pub use trainer::{distill_gradient, Event, LogRow, Progress, TrainSettings, Trainer};

use crate::dynet::{SearchSpace, SharedWeights};
use crate::error::Result;
use crate::rng::component_rng;

fn no_events(_: &Trainer, _: trainer::Event) -> Result<()> {
    Ok(())
}

/// Fresh shared weights for `space`, drawn from the run's root seed.
pub fn init_shared(space: &SearchSpace, seed: u64) -> Result<SharedWeights> {
    SharedWeights::init(space, &mut component_rng(seed, "init"))
}

/// TRADES training of the largest configuration for `epochs` epochs.
pub fn train_teacher(shared: SharedWeights, data: &Dataset, settings: &TrainSettings, epochs: usize) -> Result<Trainer> {
    let mut t = Trainer::new(shared, settings.hp.seed);
    t.run(&[Stage::Teacher { epochs }], data, settings, &mut no_events)?;
    Ok(t)
}

/// Distillation stages of `schedule` applied to a trained teacher.
pub fn distill(
    teacher: SharedWeights,
    data: &Dataset,
    settings: &TrainSettings,
    plan: &PhasePlan,
    schedule: &dyn SamplingSchedule,
) -> Result<Trainer> {
    plan.validate(teacher.space())?;
    let stages = schedule.stages(plan, teacher.space());
    let mut t = Trainer::new(teacher, settings.hp.seed);
    t.run(&stages, data, settings, &mut no_events)?;
    Ok(t)
}

/// Teacher pretraining followed by the plan's phases in order.
pub fn train_progressive(space: &SearchSpace, data: &Dataset, settings: &TrainSettings, plan: &PhasePlan) -> Result<Trainer> {
    plan.validate(space)?;
    let mut stages = vec![Stage::Teacher { epochs: plan.teacher_epochs }];
    stages.extend(Progressive.stages(plan, space));
    let mut t = Trainer::new(init_shared(space, settings.hp.seed)?, settings.hp.seed);
    t.run(&stages, data, settings, &mut no_events)?;
    Ok(t)
}

/// Random-sampling distillation from a trained teacher, for the same total
/// epoch budget as the plan's phases.
pub fn train_random_baseline(
    teacher: SharedWeights,
    data: &Dataset,
    settings: &TrainSettings,
    plan: &PhasePlan,
) -> Result<Trainer> {
    distill(teacher, data, settings, plan, &RandomSampling)
}
