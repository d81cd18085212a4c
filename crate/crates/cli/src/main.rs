use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use elastic_ard_cli::{load_config, CliError, CliResult, Pipeline};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "elastic-ard", version, about = "Progressive adversarial distillation of elastic networks")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "run.toml")]
    config: PathBuf,
    /// Overrides `out_dir` from the configuration.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially pretrain the largest network.
    TrainTeacher {
        #[arg(long)]
        resume: bool,
    },
    /// Distill the teacher into its subnets phase by phase.
    TrainProgressive {
        #[arg(long)]
        resume: bool,
    },
    /// Distill with every dimension sampled from the start.
    TrainRandom {
        #[arg(long)]
        resume: bool,
    },
    /// Natural and robust accuracy of one subnet.
    EvalSubnet {
        #[arg(long, default_value = "progressive")]
        weights: String,
        /// Architecture string, or `max`.
        #[arg(long, default_value = "max")]
        subnet: String,
    },
    /// Evaluate sampled subnets for predictor training.
    BuildPredDataset {
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        weights: Option<String>,
    },
    /// Fit the accuracy-robustness predictor.
    TrainPredictor,
    /// Multi-objective search under the compute budget.
    Search {
        #[arg(long)]
        generations: Option<usize>,
        /// Budget in MFLOPs.
        #[arg(long)]
        flops_limit: Option<f64>,
    },
    /// Accuracy-robustness scatter data of sampled subnets.
    ExportScatter {
        #[arg(long, default_value = "progressive")]
        weights: String,
        #[arg(long)]
        n: Option<usize>,
    },
}

fn print(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("summaries serialize"));
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli.config)?;
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::BuildPredDataset { rows, weights } => {
            if let Some(r) = rows {
                cfg.predictor.rows = *r;
            }
            if let Some(w) = weights {
                cfg.predictor.weights = w.clone();
            }
        }
        Command::Search { generations, flops_limit } => {
            if let Some(g) = generations {
                cfg.search.generations = *g;
            }
            if let Some(f) = flops_limit {
                cfg.search.flops_limit = *f;
            }
        }
        Command::ExportScatter { n: Some(n), .. } => cfg.scatter.n = *n,
        _ => {}
    }
    let p = Pipeline::new(cfg.resolve()?)?;
    match cli.command {
        Command::TrainTeacher { resume } => print(&p.train_teacher(resume)?),
        Command::TrainProgressive { resume } => print(&p.train_progressive(resume)?),
        Command::TrainRandom { resume } => print(&p.train_random(resume)?),
        Command::EvalSubnet { weights, subnet } => print(&p.eval_subnet(&weights, &subnet)?),
        Command::BuildPredDataset { .. } => {
            let rows = p.build_pred_dataset()?;
            print(&serde_json::json!({ "rows": rows.len(), "file": "pred_dataset.csv" }));
        }
        Command::TrainPredictor => print(&p.train_predictor()?.1),
        Command::Search { .. } => print(&p.search()?.1),
        Command::ExportScatter { weights, .. } => print(&p.export_scatter(&weights, p.run.config.scatter.n)?.1),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Config(_) => "config",
                _ => "runtime",
            };
            eprintln!("elastic-ard: {kind}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
