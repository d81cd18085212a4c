//! Comma-separated artifacts and their readers.

use std::path::Path;

use elastic_ard::data::Dataset;
use elastic_ard::dynet::{ArchConfig, SearchSpace};
use elastic_ard::evo::{Front, Generation};
use elastic_ard::protrain::LogRow;
use elastic_ard::surrogate::EvalRow;
use elastic_ard::Array;

use crate::error::{CliError, CliResult};

/// One evaluated student of an accuracy-robustness scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub config: String,
    pub acc: f64,
    pub rob: f64,
    pub flops: u64,
}

pub const SCATTER_HEADER: [&str; 4] = ["config", "acc", "rob", "flops"];

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))
}

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))
}

fn write_all<I, R>(path: &Path, header: &[String], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>()).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn records(path: &Path, header: &[String]) -> CliResult<Vec<csv::StringRecord>> {
    let mut r = reader(path)?;
    let found: Vec<String> = r.headers().map_err(|e| CliError::csv(path, e))?.iter().map(str::to_string).collect();
    if found != header {
        return Err(CliError::csv(path, format!("header {found:?}, expected {header:?}")));
    }
    r.records().map(|rec| rec.map_err(|e| CliError::csv(path, e))).collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> CliResult<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::csv(path, format!("bad field {i} in {rec:?}")))
}

fn strings(h: &[&str]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

pub fn write_scatter(rows: &[ScatterRow], path: &Path) -> CliResult<()> {
    if rows.is_empty() {
        return Err(CliError::Config("no scatter rows to export".into()));
    }
    let body = rows.iter().map(|r| [r.config.clone(), r.acc.to_string(), r.rob.to_string(), r.flops.to_string()]);
    write_all(path, &strings(&SCATTER_HEADER), body)
}

pub fn read_scatter(path: &Path) -> CliResult<Vec<ScatterRow>> {
    records(path, &strings(&SCATTER_HEADER))?
        .iter()
        .map(|r| {
            Ok(ScatterRow {
                config: field(path, r, 0)?,
                acc: field(path, r, 1)?,
                rob: field(path, r, 2)?,
                flops: field(path, r, 3)?,
            })
        })
        .collect()
}

fn eval_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    h.extend(strings(&["acc", "rob", "flops"]));
    h
}

/// Predictor rows: the feature vector, then accuracy, robustness and FLOPs.
pub fn write_eval_rows(rows: &[EvalRow], path: &Path) -> CliResult<()> {
    let d = rows.first().map_or(0, |r| r.features.len());
    let body = rows.iter().map(|r| {
        let mut v: Vec<String> = r.features.iter().map(f64::to_string).collect();
        v.extend([r.natural.to_string(), r.robust.to_string(), r.flops.to_string()]);
        v
    });
    write_all(path, &eval_header(d), body)
}

pub fn read_eval_rows(path: &Path) -> CliResult<Vec<EvalRow>> {
    let mut r = reader(path)?;
    let n = r.headers().map_err(|e| CliError::csv(path, e))?.len();
    if n < 3 {
        return Err(CliError::csv(path, "too few columns"));
    }
    let d = n - 3;
    records(path, &eval_header(d))?
        .iter()
        .map(|rec| {
            Ok(EvalRow {
                features: (0..d).map(|i| field(path, rec, i)).collect::<CliResult<_>>()?,
                natural: field(path, rec, d)?,
                robust: field(path, rec, d + 1)?,
                flops: field(path, rec, d + 2)?,
            })
        })
        .collect()
}

const LOG_HEADER: [&str; 4] = ["step", "phase", "loss", "config"];

pub fn write_log(rows: &[LogRow], path: &Path) -> CliResult<()> {
    let body = rows.iter().map(|r| [r.step.to_string(), r.phase.clone(), r.loss.to_string(), r.config.clone()]);
    write_all(path, &strings(&LOG_HEADER), body)
}

pub fn read_log(path: &Path) -> CliResult<Vec<LogRow>> {
    records(path, &strings(&LOG_HEADER))?
        .iter()
        .map(|r| {
            Ok(LogRow { step: field(path, r, 0)?, phase: field(path, r, 1)?, loss: field(path, r, 2)?, config: field(path, r, 3)? })
        })
        .collect()
}

fn genes_text(g: &[usize]) -> String {
    g.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

const HISTORY_HEADER: [&str; 6] = ["generation", "genotype", "acc", "rob", "mflops", "first_front"];

/// Every survivor of every generation.
pub fn write_search_history(history: &[Generation], path: &Path) -> CliResult<()> {
    let mut body = Vec::new();
    for (g, gen) in history.iter().enumerate() {
        for (i, m) in gen.population.iter().enumerate() {
            body.push(vec![
                g.to_string(),
                genes_text(&m.genes),
                m.objectives[0].to_string(),
                m.objectives[1].to_string(),
                m.mflops.to_string(),
                gen.first_front.contains(&i).to_string(),
            ]);
        }
    }
    write_all(path, &strings(&HISTORY_HEADER), body)
}

/// One row of the final first front.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontRow {
    pub config: String,
    pub genotype: Vec<usize>,
    pub acc: f64,
    pub rob: f64,
    pub mflops: f64,
    pub crowding: f64,
}

const FRONT_HEADER: [&str; 6] = ["config", "genotype", "acc", "rob", "mflops", "crowding"];

pub fn front_rows(space: &SearchSpace, front: &Front) -> CliResult<Vec<FrontRow>> {
    front
        .members
        .iter()
        .zip(&front.crowding)
        .map(|(m, &c)| {
            Ok(FrontRow {
                config: elastic_ard::dynet::from_genotype(space, &m.genes)?.to_string(),
                genotype: m.genes.clone(),
                acc: m.objectives[0],
                rob: m.objectives[1],
                mflops: m.mflops,
                crowding: c,
            })
        })
        .collect()
}

pub fn write_front(rows: &[FrontRow], path: &Path) -> CliResult<()> {
    let body = rows.iter().map(|r| {
        [r.config.clone(), genes_text(&r.genotype), r.acc.to_string(), r.rob.to_string(), r.mflops.to_string(), r.crowding.to_string()]
    });
    write_all(path, &strings(&FRONT_HEADER), body)
}

pub fn read_front(path: &Path) -> CliResult<Vec<FrontRow>> {
    records(path, &strings(&FRONT_HEADER))?
        .iter()
        .map(|r| {
            let genes: String = field(path, r, 1)?;
            Ok(FrontRow {
                config: field::<ArchConfig>(path, r, 0)?.to_string(),
                genotype: genes
                    .split_whitespace()
                    .map(|g| g.parse().map_err(|_| CliError::csv(path, format!("bad genotype {genes:?}"))))
                    .collect::<CliResult<_>>()?,
                acc: field(path, r, 2)?,
                rob: field(path, r, 3)?,
                mflops: field(path, r, 4)?,
                crowding: field(path, r, 5)?,
            })
        })
        .collect()
}

/// Reads `label,x0,...` rows (with a header line) into a dataset of `shape` examples.
pub fn read_dataset_csv(path: &Path, shape: [usize; 3], classes: usize) -> CliResult<Dataset> {
    let d: usize = shape.iter().product();
    let mut r = reader(path)?;
    let mut labels = Vec::new();
    let mut x = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        if rec.len() != d + 1 {
            return Err(CliError::csv(path, format!("{} columns, expected {}", rec.len(), d + 1)));
        }
        labels.push(field(path, &rec, 0)?);
        for i in 1..=d {
            x.push(field(path, &rec, i)?);
        }
    }
    if labels.is_empty() {
        return Err(elastic_ard::Error::Empty(path.display().to_string()).into());
    }
    let [c, h, w] = shape;
    Ok(Dataset::new(Array::new(vec![labels.len(), c, h, w], x)?, labels, classes)?)
}

pub fn write_dataset_csv(data: &Dataset, path: &Path) -> CliResult<()> {
    let d: usize = data.example_shape().iter().product();
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    let body = data.labels().iter().zip(data.inputs().data().chunks(d)).map(|(l, xs)| {
        let mut v = vec![l.to_string()];
        v.extend(xs.iter().map(f64::to_string));
        v
    });
    write_all(path, &header, body)
}
