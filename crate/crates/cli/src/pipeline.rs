//! The subcommands, each writing its artifacts under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use elastic_ard::advkit::EvalResult;
use elastic_ard::data::Dataset;
use elastic_ard::dynet::{all_dims, count_flops, ArchConfig, SharedWeights};
use elastic_ard::evo::{search, SearchResult};
use elastic_ard::protrain::{
    init_shared, Progressive, RandomSampling, SamplingSchedule, Stage, Trainer,
};
use elastic_ard::rng::component_rng;
use elastic_ard::surrogate::{build_eval_dataset, evaluate_subnet, train_predictor, Predictor, TrainingReport};
use serde::Serialize;

use crate::config::Resolved;
use crate::csvio::{
    front_rows, read_eval_rows, write_eval_rows, write_front, write_log, write_scatter, write_search_history, ScatterRow,
};
use crate::error::{CliError, CliResult};

pub struct Pipeline {
    pub run: Resolved,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub stages: Vec<String>,
    pub steps: u64,
    pub final_loss: Option<f64>,
    /// Artifact names within the output directory.
    pub checkpoint: String,
    pub weights: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub weights: String,
    pub config: String,
    pub flops: u64,
    pub result: EvalResult,
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictorSummary {
    pub rows: usize,
    pub report: TrainingReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SearchSummary {
    pub generations: usize,
    pub front_size: usize,
    pub feasible: usize,
    pub best_acc: Option<(String, f64, f64)>,
    pub best_rob: Option<(String, f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScatterSummary {
    pub weights: String,
    pub rows: usize,
    pub mean_acc: f64,
    pub mean_rob: f64,
    pub file: String,
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("summaries serialize");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

impl Pipeline {
    pub fn new(run: Resolved) -> CliResult<Self> {
        let out = &run.config.out_dir;
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        Ok(Self { run })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.run.config.out_dir.join(name)
    }

    /// `teacher`, `progressive` and `random` name this run's weights; anything else is a path.
    pub fn weights_path(&self, name: &str) -> PathBuf {
        match name {
            "teacher" | "progressive" | "random" => self.out(&format!("{name}.weights")),
            other => PathBuf::from(other),
        }
    }

    pub fn load_weights(&self, name: &str) -> CliResult<SharedWeights> {
        let w = SharedWeights::load(self.weights_path(name))?;
        if w.space() != &self.run.space {
            return Err(CliError::Config(format!("weights {name:?} were trained for a different space")));
        }
        Ok(w)
    }

    fn train(&self, name: &str, start: impl FnOnce() -> CliResult<SharedWeights>, stages: &[Stage], resume: bool) -> CliResult<TrainSummary> {
        let ckpt = self.out(&format!("{name}.ckpt"));
        let mut trainer = if resume && ckpt.exists() {
            let t = Trainer::load(&ckpt)?;
            if t.space() != &self.run.space {
                return Err(CliError::Config(format!("checkpoint {} belongs to a different space", ckpt.display())));
            }
            t
        } else {
            Trainer::new(start()?, self.run.settings.hp.seed)
        };
        trainer.run(stages, &self.run.train, &self.run.settings, &mut |t, _| t.save(&ckpt))?;
        trainer.save(&ckpt)?;
        let weights = self.out(&format!("{name}.weights"));
        trainer.shared.save(&weights)?;
        write_log(&trainer.log, &self.out(&format!("{name}_log.csv")))?;
        let summary = TrainSummary {
            stages: stages.iter().map(|s| s.name().to_string()).collect(),
            steps: trainer.progress.step,
            final_loss: trainer.log.last().map(|r| r.loss),
            checkpoint: format!("{name}.ckpt"),
            weights: format!("{name}.weights"),
        };
        write_json(&self.out(&format!("{name}.json")), &summary)?;
        Ok(summary)
    }

    pub fn train_teacher(&self, resume: bool) -> CliResult<TrainSummary> {
        let stages = [Stage::Teacher { epochs: self.run.plan.teacher_epochs }];
        self.train("teacher", || Ok(init_shared(&self.run.space, self.run.config.seed)?), &stages, resume)
    }

    fn distill(&self, name: &str, schedule: &dyn SamplingSchedule, resume: bool) -> CliResult<TrainSummary> {
        let stages = schedule.stages(&self.run.plan, &self.run.space);
        self.train(name, || self.load_weights("teacher"), &stages, resume)
    }

    pub fn train_progressive(&self, resume: bool) -> CliResult<TrainSummary> {
        self.distill("progressive", &Progressive, resume)
    }

    pub fn train_random(&self, resume: bool) -> CliResult<TrainSummary> {
        self.distill("random", &RandomSampling, resume)
    }

    fn eval_set(&self, cap: Option<usize>) -> CliResult<Dataset> {
        Ok(match cap {
            Some(n) => self.run.test.head(n)?,
            None => self.run.test.clone(),
        })
    }

    /// Recalibrates and evaluates one subnet under every evaluation attack.
    pub fn eval_subnet(&self, weights: &str, config: &str) -> CliResult<EvalSummary> {
        let shared = self.load_weights(weights)?;
        let space = &self.run.space;
        let c: ArchConfig = if config == "max" {
            space.max_config()
        } else {
            config.parse().map_err(|e: elastic_ard::Error| CliError::Config(e.to_string()))?
        };
        space.check_config(&c).map_err(|e| CliError::Config(e.to_string()))?;
        let result = evaluate_subnet(&shared, &c, &self.run.train, &self.run.test, &self.run.config.attacks.eval, self.run.config.seed)?;
        let summary = EvalSummary {
            weights: weights.to_string(),
            config: c.to_string(),
            flops: count_flops(space, &c, space.input)?.flops,
            result,
        };
        let stem = Path::new(weights).file_stem().map_or("weights".into(), |s| s.to_string_lossy().into_owned());
        write_json(&self.out(&format!("eval_{stem}.json")), &summary)?;
        Ok(summary)
    }

    pub fn build_pred_dataset(&self) -> CliResult<Vec<elastic_ard::surrogate::EvalRow>> {
        let p = &self.run.config.predictor;
        let shared = self.load_weights(&p.weights)?;
        let eval = self.eval_set(p.eval_examples)?;
        let rows: Vec<_> = build_eval_dataset(&shared, p.rows, &self.run.train, &eval, &self.run.config.attacks.eval[0], self.run.config.seed)?
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        write_eval_rows(&rows, &self.out("pred_dataset.csv"))?;
        Ok(rows)
    }

    pub fn train_predictor(&self) -> CliResult<(Predictor, PredictorSummary)> {
        let rows = read_eval_rows(&self.out("pred_dataset.csv"))?;
        let spec = elastic_ard::surrogate::PredictorSpec { seed: self.run.config.seed, ..self.run.config.predictor.model.clone() };
        let p = train_predictor(&rows, &spec)?;
        p.check_space(&self.run.space).map_err(|e| CliError::Config(e.to_string()))?;
        p.save(self.out("predictor.bin"))?;
        let summary = PredictorSummary { rows: rows.len(), report: p.report.clone() };
        write_json(&self.out("predictor.json"), &summary)?;
        Ok((p, summary))
    }

    pub fn search(&self) -> CliResult<(SearchResult, SearchSummary)> {
        let p = Predictor::load(self.out("predictor.bin"))?;
        let space = &self.run.space;
        p.check_space(space).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = elastic_ard::evo::SearchConfig { seed: self.run.config.seed, ..self.run.config.search.clone() };
        let fitness = |c: &ArchConfig| p.predict(space, c).map(|(a, r)| vec![a, r]);
        let result = search(space, &fitness, &cfg)?;
        write_search_history(&result.history, &self.out("search_history.csv"))?;
        let rows = front_rows(space, &result.front)?;
        write_front(&rows, &self.out("search_front.csv"))?;
        let pick = |k: usize| {
            rows.iter()
                .max_by(|a, b| [a.acc, a.rob][k].total_cmp(&[b.acc, b.rob][k]))
                .map(|r| (r.config.clone(), r.acc, r.rob))
        };
        let summary = SearchSummary {
            generations: cfg.generations,
            front_size: rows.len(),
            feasible: result.population.iter().filter(|i| i.feasible()).count(),
            best_acc: pick(0),
            best_rob: pick(1),
        };
        write_json(&self.out("search.json"), &summary)?;
        Ok((result, summary))
    }

    /// Evaluates `n` uniformly drawn subnets (the same draw for any weights) against the first evaluation attack.
    pub fn export_scatter(&self, weights: &str, n: usize) -> CliResult<(Vec<ScatterRow>, ScatterSummary)> {
        let shared = self.load_weights(weights)?;
        let space = &self.run.space;
        let mut rng = component_rng(self.run.config.seed, "scatter");
        let configs: Vec<ArchConfig> = (0..n).map(|_| space.sample_config(&all_dims(), &mut rng)).collect();
        let rows = elastic_ard::surrogate::eval_rows(
            &shared,
            &configs,
            &self.run.train,
            &self.run.test,
            &self.run.config.attacks.eval[0],
            self.run.config.seed,
        )?
        .into_iter()
        .map(|(c, r)| ScatterRow { config: c.to_string(), acc: r.natural, rob: r.robust, flops: r.flops })
        .collect::<Vec<_>>();
        let stem = Path::new(weights).file_stem().map_or("weights".into(), |s| s.to_string_lossy().into_owned());
        let file = format!("scatter_{stem}.csv");
        write_scatter(&rows, &self.out(&file))?;
        let k = rows.len() as f64;
        let summary = ScatterSummary {
            weights: weights.to_string(),
            rows: rows.len(),
            mean_acc: rows.iter().map(|r| r.acc).sum::<f64>() / k,
            mean_rob: rows.iter().map(|r| r.rob).sum::<f64>() / k,
            file,
        };
        write_json(&self.out(&format!("scatter_{stem}.json")), &summary)?;
        Ok((rows, summary))
    }
}
