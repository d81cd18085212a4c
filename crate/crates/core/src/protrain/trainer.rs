//! The training loop shared by teacher pretraining and distillation, with
//! resumable checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::{Hyperparams, Stage};
use super::sgd::{sgd_step, SgdState};
use crate::advkit::{rslad_losses, trades_loss, AttackSpec, DistillSpec, TeacherMode};
use crate::archive::Archive;
use crate::array::Array;
use crate::autodiff::{infer, GradientSet, Moments, Tape};
use crate::data::Dataset;
use crate::dynet::{extract_subnet, ArchConfig, BnMode, SearchSpace, SharedWeights, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng::{component_rng, Rng, RngState};

const ARCHIVE_KIND: &str = "training-state";

/// Everything a training run needs besides the data and the stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub hp: Hyperparams,
    /// Inner maximization of the teacher's TRADES objective.
    pub teacher_attack: AttackSpec,
    pub beta: f64,
    /// Inner maximization of the distillation objective.
    pub student_attack: AttackSpec,
    pub distill: DistillSpec,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.teacher_attack.validate()?;
        self.student_attack.validate()?;
        self.distill.validate()?;
        if !(self.beta >= 0.0) {
            return Err(Error::Invalid(format!("beta {} must be non-negative", self.beta)));
        }
        Ok(())
    }
}

/// One sampled subnet's loss at one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    pub config: String,
}

/// Position reached in a list of stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    EpochEnd { stage: usize, epoch: usize },
    StageEnd { stage: usize },
}

#[derive(Serialize, Deserialize)]
struct Meta {
    space: SearchSpace,
    progress: Progress,
    rng: RngState,
    stage_names: Vec<String>,
    log: Vec<LogRow>,
    has_teacher: bool,
}

/// Trainer state: the shared store, optimizer buffers, generator, frozen
/// teacher (if any) and the loss log.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub shared: SharedWeights,
    pub sgd: SgdState,
    pub teacher: Option<SharedWeights>,
    pub progress: Progress,
    pub log: Vec<LogRow>,
    rng: Rng,
    stage_names: Vec<String>,
}

impl Trainer {
    pub fn new(shared: SharedWeights, seed: u64) -> Self {
        Self {
            shared,
            sgd: SgdState::default(),
            teacher: None,
            progress: Progress::default(),
            log: Vec::new(),
            rng: component_rng(seed, "train"),
            stage_names: Vec::new(),
        }
    }

    pub fn space(&self) -> &SearchSpace {
        self.shared.space()
    }

    /// Runs `stages` from the current position to the end, calling
    /// `on_event` after every epoch and stage.
    pub fn run(
        &mut self,
        stages: &[Stage],
        data: &Dataset,
        settings: &TrainSettings,
        on_event: &mut dyn FnMut(&Trainer, Event) -> Result<()>,
    ) -> Result<()> {
        settings.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if data.example_shape() != self.space().input || data.classes() != self.space().classes {
            return Err(Error::ConfigMismatch(format!(
                "dataset {:?} with {} classes, network expects {:?} with {}",
                data.example_shape(),
                data.classes(),
                self.space().input,
                self.space().classes
            )));
        }
        let names: Vec<String> = stages.iter().map(|s| s.name().to_string()).collect();
        if self.progress != Progress::default() && self.stage_names != names {
            return Err(Error::ConfigMismatch(format!("resuming {:?} with stages {names:?}", self.stage_names)));
        }
        self.stage_names = names;
        for st in stages {
            if let Stage::Distill { free_dims, n_sub, .. } = st {
                if *n_sub < 1 || free_dims.iter().any(|&d| !self.space().has_dim(d)) || free_dims.is_empty() {
                    return Err(Error::Invalid(format!("stage {} frees {free_dims:?} with n_sub {n_sub}", st.name())));
                }
            }
        }
        while self.progress.stage < stages.len() {
            let idx = self.progress.stage;
            let stage = &stages[idx];
            if let Stage::Distill { .. } = stage {
                if settings.distill.teacher_mode == TeacherMode::FrozenSnapshot && self.teacher.is_none() {
                    self.teacher = Some(self.shared.clone());
                }
            }
            while self.progress.epoch < stage.epochs() {
                self.epoch(stage, data, settings)?;
                self.progress.epoch += 1;
                on_event(self, Event::EpochEnd { stage: idx, epoch: self.progress.epoch })?;
            }
            self.progress.stage += 1;
            self.progress.epoch = 0;
            on_event(self, Event::StageEnd { stage: idx })?;
        }
        Ok(())
    }

    fn epoch(&mut self, stage: &Stage, data: &Dataset, s: &TrainSettings) -> Result<()> {
        let opt = s.hp.sgd(self.progress.epoch);
        for idx in data.epoch_batches(s.hp.batch_size, &mut self.rng) {
            let (x, y) = data.batch(&idx)?;
            self.progress.step += 1;
            let diverged = |e: Error, name: &str, step: u64| match e {
                Error::NonFinite(op) => Error::Diverged(format!("{name}, step {step}: non-finite value in {op}")),
                e => e,
            };
            let (grads, moments) = match stage {
                Stage::Teacher { .. } => self
                    .teacher_step(&x, &y, s)
                    .map_err(|e| diverged(e, stage.name(), self.progress.step))?,
                Stage::Distill { free_dims, n_sub, .. } => {
                    let space = self.shared.space();
                    let configs: Vec<ArchConfig> =
                        (0..*n_sub).map(|_| space.sample_config(free_dims, &mut self.rng)).collect();
                    self.distill_step(stage.name(), &configs, &x, s)
                        .map_err(|e| diverged(e, stage.name(), self.progress.step))?
                }
            };
            self.shared.update_running_stats(&moments, BN_MOMENTUM)?;
            sgd_step(&mut self.shared, &grads, &mut self.sgd, &opt)?;
        }
        Ok(())
    }

    fn teacher_step(&mut self, x: &Array, y: &[usize], s: &TrainSettings) -> Result<(GradientSet, Vec<Moments>)> {
        let config = self.space().max_config();
        let view = extract_subnet(&self.shared, &config, BnMode::Batch)?;
        let mut tape = Tape::new();
        let l = trades_loss(&view, &mut tape, x, y, s.beta, &s.teacher_attack, &mut self.rng)?;
        let loss = tape.value(l.loss).item();
        let grads = tape.backward_scalar(l.loss)?;
        self.log.push(LogRow { step: self.progress.step, phase: "teacher".into(), loss, config: config.to_string() });
        Ok((grads, tape.take_moments()))
    }

    fn distill_step(
        &mut self,
        phase: &str,
        configs: &[ArchConfig],
        x: &Array,
        s: &TrainSettings,
    ) -> Result<(GradientSet, Vec<Moments>)> {
        let max = self.space().max_config();
        let source = match (&self.teacher, s.distill.teacher_mode) {
            (Some(t), TeacherMode::FrozenSnapshot) => t,
            _ => &self.shared,
        };
        let targets = infer(&extract_subnet(source, &max, BnMode::Batch)?, x)?;
        let (grads, moments, losses) = distill_gradient(&self.shared, configs, x, &targets, s, &mut self.rng)?;
        for (c, loss) in configs.iter().zip(losses) {
            self.log.push(LogRow { step: self.progress.step, phase: phase.to_string(), loss, config: c.to_string() });
        }
        Ok((grads, moments))
    }

    pub fn to_archive(&self) -> Archive {
        let meta = Meta {
            space: self.space().clone(),
            progress: self.progress,
            rng: RngState::capture(&self.rng),
            stage_names: self.stage_names.clone(),
            log: self.log.clone(),
            has_teacher: self.teacher.is_some(),
        };
        let mut a = Archive::new(ARCHIVE_KIND, serde_json::to_value(meta).expect("metadata serializes"));
        a = self.shared.to_archive_prefixed("w/", a);
        for (n, v) in &self.sgd.velocity {
            a.push(format!("v/{n}"), v.clone());
        }
        if let Some(t) = &self.teacher {
            a = t.to_archive_prefixed("t/", a);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(ARCHIVE_KIND)?;
        let meta: Meta = serde_json::from_value(a.meta.clone()).map_err(|e| Error::Format(format!("training state: {e}")))?;
        let shared = SharedWeights::from_archive_prefixed(&meta.space, "w/", a)?;
        let teacher =
            if meta.has_teacher { Some(SharedWeights::from_archive_prefixed(&meta.space, "t/", a)?) } else { None };
        let mut sgd = SgdState::default();
        for (n, v) in &a.arrays {
            if let Some(name) = n.strip_prefix("v/") {
                let p = shared.param(name).map_err(|_| Error::Format(format!("velocity for unknown {name:?}")))?;
                if p.shape() != v.shape() {
                    return Err(Error::Format(format!("velocity {name}: bad shape")));
                }
                sgd.velocity.insert(name.to_string(), v.clone());
            }
        }
        let rng = meta.rng.restore().ok_or_else(|| Error::Format("bad generator state".into()))?;
        Ok(Self { shared, sgd, teacher, progress: meta.progress, log: meta.log, rng, stage_names: meta.stage_names })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Summed distillation gradient of `configs` against `targets` on one batch,
/// with the batch moments observed and each config's loss.
pub fn distill_gradient(
    shared: &SharedWeights,
    configs: &[ArchConfig],
    x: &Array,
    targets: &Array,
    s: &TrainSettings,
    rng: &mut Rng,
) -> Result<(GradientSet, Vec<Moments>, Vec<f64>)> {
    let mut total = GradientSet::default();
    let mut moments = Vec::new();
    let mut losses = Vec::with_capacity(configs.len());
    for c in configs {
        let view = extract_subnet(shared, c, BnMode::Batch)?;
        let mut tape = Tape::new();
        let l = rslad_losses(&view, &mut tape, x, targets, &s.distill, &s.student_attack, rng)?;
        losses.push(tape.value(l.loss).item());
        total.accumulate(&tape.backward_scalar(l.loss)?);
        moments.extend(tape.take_moments());
    }
    Ok((total, moments, losses))
}
