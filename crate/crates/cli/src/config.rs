//! The run configuration file and its validation.

use std::path::{Path, PathBuf};

use elastic_ard::advkit::{AttackSpec, DistillSpec};
use elastic_ard::data::{gaussian_mixture, load_cifar, CifarKind, Dataset, MixtureSpec};
use elastic_ard::dynet::SearchSpace;
use elastic_ard::evo::SearchConfig;
use elastic_ard::protrain::{Hyperparams, Phase, PhasePlan, TrainSettings};
use elastic_ard::rng::component_rng;
use elastic_ard::surrogate::PredictorSpec;
use serde::{Deserialize, Serialize};

use crate::csvio::read_dataset_csv;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub space: SpaceConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: Hyperparams,
    /// Weight of the robust term in the teacher's TRADES objective.
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub plan: PlanConfig,
    pub attacks: AttackConfig,
    #[serde(default)]
    pub distill: DistillSpec,
    #[serde(default)]
    pub predictor: PredictorConfig,
    pub search: SearchConfig,
    #[serde(default)]
    pub scatter: ScatterConfig,
}

fn default_beta() -> f64 {
    6.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceConfig {
    Preset { preset: String },
    Custom(SearchSpace),
}

impl SpaceConfig {
    pub fn resolve(&self) -> CliResult<SearchSpace> {
        let space = match self {
            SpaceConfig::Custom(s) => s.clone(),
            SpaceConfig::Preset { preset } => match preset.as_str() {
                "resnet-like" => SearchSpace::resnet_like(),
                "mobilenet-like" => SearchSpace::mobilenet_like(),
                other => return Err(CliError::Config(format!("unknown space preset {other:?}"))),
            },
        };
        space.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(space)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian-mixture images shaped like the space's input.
    Synthetic {
        examples_per_class: usize,
        test_examples: usize,
        separation: f64,
        noise: f64,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar100 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// `label,x0,x1,...` rows with pixel values in `[0, 1]`.
    Csv { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub teacher_epochs: usize,
    /// Epochs of each standard phase; ignored when `phases` is given.
    #[serde(default)]
    pub phase_epochs: usize,
    #[serde(default)]
    pub phases: Option<Vec<Phase>>,
    #[serde(default = "one")]
    pub n_sub: usize,
}

fn one() -> usize {
    1
}

impl PlanConfig {
    pub fn resolve(&self, space: &SearchSpace) -> PhasePlan {
        let mut plan = PhasePlan::standard(space, self.teacher_epochs, self.phase_epochs);
        if let Some(p) = &self.phases {
            plan.phases = p.clone();
        }
        plan.n_sub = self.n_sub;
        plan
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub teacher: AttackSpec,
    pub student: AttackSpec,
    /// Attacks reported by evaluation; the first also scores predictor rows and scatter points.
    pub eval: Vec<AttackSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    #[serde(default = "default_rows")]
    pub rows: usize,
    /// Which trained weights the evaluated rows come from.
    #[serde(default = "default_weights")]
    pub weights: String,
    /// Cap on the test examples used per row.
    #[serde(default)]
    pub eval_examples: Option<usize>,
    #[serde(default)]
    pub model: PredictorSpec,
}

fn default_rows() -> usize {
    200
}

fn default_weights() -> String {
    "progressive".into()
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { rows: default_rows(), weights: default_weights(), eval_examples: None, model: PredictorSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterConfig {
    #[serde(default = "default_scatter")]
    pub n: usize,
}

fn default_scatter() -> usize {
    50
}

impl Default for ScatterConfig {
    fn default() -> Self {
        Self { n: default_scatter() }
    }
}

/// A validated configuration with its data loaded.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub space: SearchSpace,
    pub plan: PhasePlan,
    pub settings: TrainSettings,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text)
}

fn invalid(e: elastic_ard::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Validates every section and loads the data. No training happens here.
    pub fn resolve(&self) -> CliResult<Resolved> {
        let space = self.space.resolve()?;
        let plan = self.plan.resolve(&space);
        plan.validate(&space).map_err(invalid)?;
        let settings = TrainSettings {
            hp: Hyperparams { seed: self.seed, ..self.train.clone() },
            teacher_attack: self.attacks.teacher.clone(),
            beta: self.beta,
            student_attack: self.attacks.student.clone(),
            distill: self.distill.clone(),
        };
        settings.validate().map_err(invalid)?;
        if self.attacks.eval.is_empty() {
            return Err(CliError::Config("at least one evaluation attack is required".into()));
        }
        for a in &self.attacks.eval {
            a.validate().map_err(invalid)?;
        }
        self.predictor.model.validate().map_err(invalid)?;
        if self.predictor.rows < 2 {
            return Err(CliError::Config("the predictor needs at least two rows".into()));
        }
        let mut search = self.search.clone();
        search.seed = self.seed;
        search.validate().map_err(invalid)?;
        if self.scatter.n < 1 {
            return Err(CliError::Config("scatter export needs at least one subnet".into()));
        }
        let (train, test) = self.load_data(&space)?;
        for (name, d) in [("training", &train), ("test", &test)] {
            if d.example_shape() != space.input || d.classes() != space.classes {
                return Err(CliError::Config(format!(
                    "{name} data is {:?} with {} classes, the space expects {:?} with {}",
                    d.example_shape(),
                    d.classes(),
                    space.input,
                    space.classes
                )));
            }
        }
        Ok(Resolved { config: self.clone(), space, plan, settings, train, test })
    }

    fn load_data(&self, space: &SearchSpace) -> CliResult<(Dataset, Dataset)> {
        let cap = |d: Dataset, n: Option<usize>| -> CliResult<Dataset> {
            Ok(match n {
                Some(n) => d.head(n)?,
                None => d,
            })
        };
        match &self.data {
            DataConfig::Synthetic { examples_per_class, test_examples, separation, noise } => {
                let spec = MixtureSpec {
                    examples: examples_per_class * space.classes,
                    classes: space.classes,
                    shape: space.input,
                    separation: *separation,
                    noise: *noise,
                };
                if !(*noise >= 0.0) || !(*separation >= 0.0) {
                    return Err(CliError::Config("separation and noise must be non-negative".into()));
                }
                let all = gaussian_mixture(&spec, &mut component_rng(self.seed, "data")).map_err(invalid)?;
                all.split(*test_examples, &mut component_rng(self.seed, "split")).map_err(invalid)
            }
            DataConfig::Cifar10 { train, test, limit, test_limit } | DataConfig::Cifar100 { train, test, limit, test_limit } => {
                let kind = if matches!(self.data, DataConfig::Cifar10 { .. }) { CifarKind::Ten } else { CifarKind::Hundred };
                let classes = if kind == CifarKind::Ten { 10 } else { 100 };
                if space.input != [3, 32, 32] || space.classes != classes {
                    return Err(CliError::Config(format!(
                        "CIFAR data needs a [3, 32, 32] space with {classes} classes, got {:?} with {}",
                        space.input, space.classes
                    )));
                }
                Ok((cap(load_cifar(train, kind)?, *limit)?, cap(load_cifar(test, kind)?, *test_limit)?))
            }
            DataConfig::Csv { train, test } => {
                Ok((read_dataset_csv(train, space.input, space.classes)?, read_dataset_csv(test, space.input, space.classes)?))
            }
        }
    }
}
