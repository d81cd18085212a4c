//! Accuracy-robustness predictor: evaluated-subnet datasets and a small
//! fully-connected regressor over architecture encodings.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::advkit::{evaluate, AttackSpec, EvalResult};
use crate::archive::Archive;
use crate::array::Array;
use crate::autodiff::nn::{Dense, Mlp};
use crate::autodiff::{infer, Tape};
use crate::data::Dataset;
use crate::dynet::{
    all_dims, count_flops, encode_config, extract_subnet, feature_len, recalibrate_bn, ArchConfig, BnMode, SearchSpace,
    SharedWeights,
};
use crate::error::{Error, Result};
use crate::protrain::{sgd_step, DecayScope, SgdOptions, SgdState};
use crate::rng::{component_rng, derive_seed, Rng};

const ARCHIVE_KIND: &str = "predictor";

/// One evaluated subnet.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub features: Vec<f64>,
    pub natural: f64,
    pub robust: f64,
    pub flops: u64,
}

/// Examples used to recalibrate a subnet's normalization statistics.
pub const CALIBRATION_EXAMPLES: usize = 512;

/// Recalibrates `config` on the first [`CALIBRATION_EXAMPLES`] of `calib`
/// and evaluates it on `eval`. Attack randomness is keyed by the
/// configuration, so equal configurations score equally.
pub fn evaluate_subnet(
    shared: &SharedWeights,
    config: &ArchConfig,
    calib: &Dataset,
    eval: &Dataset,
    attacks: &[AttackSpec],
    seed: u64,
) -> Result<EvalResult> {
    let calib = calib.head(CALIBRATION_EXAMPLES)?;
    let stats = recalibrate_bn(shared, config, &[calib.inputs().clone()])?;
    let view = extract_subnet(shared, config, BnMode::Fixed(&stats))?;
    let mut rng: Rng = component_rng(seed, &format!("eval/{config}"));
    evaluate(&view, eval, attacks, eval.len().min(256), &mut rng)
}

/// Samples `n` configurations uniformly and evaluates each against one attack.
pub fn build_eval_dataset(
    shared: &SharedWeights,
    n: usize,
    calib: &Dataset,
    eval: &Dataset,
    attack: &AttackSpec,
    seed: u64,
) -> Result<Vec<(ArchConfig, EvalRow)>> {
    if n < 1 {
        return Err(Error::Invalid("need at least one configuration".into()));
    }
    let space = shared.space();
    let free = all_dims().into_iter().filter(|&d| space.has_dim(d)).collect();
    let mut rng = component_rng(seed, "pred-dataset");
    let configs: Vec<ArchConfig> = (0..n).map(|_| space.sample_config(&free, &mut rng)).collect();
    eval_rows(shared, &configs, calib, eval, attack, seed)
}

/// Evaluates the given configurations, one row each.
pub fn eval_rows(
    shared: &SharedWeights,
    configs: &[ArchConfig],
    calib: &Dataset,
    eval: &Dataset,
    attack: &AttackSpec,
    seed: u64,
) -> Result<Vec<(ArchConfig, EvalRow)>> {
    let space = shared.space();
    configs
        .iter()
        .map(|c| {
            let r = evaluate_subnet(shared, c, calib, eval, std::slice::from_ref(attack), seed)?;
            let row = EvalRow {
                features: encode_config(space, c)?,
                natural: r.natural,
                robust: r.robust[0].1,
                flops: count_flops(space, c, space.input)?.flops,
            };
            Ok((c.clone(), row))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSpec {
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Fraction of rows held out for validation.
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn hidden() -> Vec<usize> {
        vec![128, 128]
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            hidden: defaults::hidden(),
            epochs: defaults::epochs(),
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: 0.0,
            batch_size: defaults::batch_size(),
            val_fraction: defaults::val_fraction(),
            seed: 0,
        }
    }
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0)
            || !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay < 0.0
            || self.batch_size < 1
            || !(0.0..1.0).contains(&self.val_fraction)
        {
            return Err(Error::Invalid(format!("predictor settings out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean squared error over the training rows after each epoch.
    pub train_loss: Vec<f64>,
    pub train_rows: usize,
    pub val_rows: usize,
    /// `(accuracy, robustness)` RMSE on the held-out rows, when any.
    pub val_rmse: Option<(f64, f64)>,
}

/// Regressor from configuration features to (accuracy, robustness).
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    net: Mlp,
    mean: Vec<f64>,
    scale: Vec<f64>,
    pub report: TrainingReport,
}

fn stack(rows: &[&EvalRow]) -> Result<(Array, Array)> {
    let d = rows[0].features.len();
    let x = rows.iter().flat_map(|r| r.features.iter().copied()).collect();
    let y = rows.iter().flat_map(|r| [r.natural, r.robust]).collect();
    Ok((Array::new(vec![rows.len(), d], x)?, Array::new(vec![rows.len(), 2], y)?))
}

/// Splits `rows` into training and held-out parts by a seeded shuffle.
pub fn split_rows(rows: &[EvalRow], val_fraction: f64, seed: u64) -> (Vec<&EvalRow>, Vec<&EvalRow>) {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.shuffle(&mut component_rng(seed, "pred-split"));
    let n_val = (rows.len() as f64 * val_fraction).round() as usize;
    let (val, train) = idx.split_at(n_val);
    (train.iter().map(|&i| &rows[i]).collect(), val.iter().map(|&i| &rows[i]).collect())
}

/// Mean-squared-error regression of (accuracy, robustness) on features.
///
/// Features are standardized with training-set statistics. The output layer
/// starts at zero weight with its bias at the training-target mean.
pub fn train_predictor(rows: &[EvalRow], spec: &PredictorSpec) -> Result<Predictor> {
    spec.validate()?;
    if rows.len() < 2 {
        return Err(Error::Invalid("predictor needs at least two rows".into()));
    }
    let d = rows[0].features.len();
    if rows.iter().any(|r| r.features.len() != d) {
        return Err(Error::Shape("rows have different feature lengths".into()));
    }
    let (train, val) = split_rows(rows, spec.val_fraction, spec.seed);
    if train.is_empty() || (spec.val_fraction > 0.0 && val.is_empty()) {
        return Err(Error::Invalid(format!("degenerate split: {} train, {} validation rows", train.len(), val.len())));
    }
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|r| r.features[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = train.iter().map(|r| (r.features[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 }
        })
        .collect();

    let mut rng = component_rng(spec.seed, "pred-init");
    let mut widths = vec![d];
    widths.extend(&spec.hidden);
    let mut layers: Vec<Dense> = widths.windows(2).map(|w| Dense::he_normal(w[0], w[1], &mut rng)).collect();
    let mut out = Dense::zeros(*widths.last().unwrap(), 2);
    out.bias = Array::from_vec(vec![
        train.iter().map(|r| r.natural).sum::<f64>() / n,
        train.iter().map(|r| r.robust).sum::<f64>() / n,
    ]);
    layers.push(out);
    let mut p = Predictor { net: Mlp::new(layers)?, mean, scale, report: TrainingReport::default() };

    let (tx, ty) = stack(&train)?;
    let tx = p.normalize(&tx);
    let opt = SgdOptions { lr: spec.lr, momentum: spec.momentum, weight_decay: spec.weight_decay, decay_scope: DecayScope::All };
    let mut state = SgdState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = component_rng(spec.seed, "pred-batches");
    for _ in 0..spec.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(spec.batch_size) {
            let (bx, by) = (tx.select_rows(chunk)?, ty.select_rows(chunk)?);
            let mut tape = Tape::new();
            let xv = tape.input(bx, false)?;
            let z = crate::autodiff::Model::forward(&p.net, &mut tape, xv)?;
            let l = tape.mse(z, &by)?;
            let g = tape.backward_scalar(l)?;
            sgd_step(&mut p.net, &g, &mut state, &opt)?;
        }
        let pred = infer(&p.net, &tx)?;
        let mse = pred.data().iter().zip(ty.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ty.len() as f64;
        p.report.train_loss.push(mse);
    }
    p.report.train_rows = train.len();
    p.report.val_rows = val.len();
    if !val.is_empty() {
        p.report.val_rmse = Some(rmse(&p, &val.into_iter().cloned().collect::<Vec<_>>())?);
    }
    Ok(p)
}

impl Predictor {
    fn normalize(&self, x: &Array) -> Array {
        let d = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) * self.scale[j];
        }
        out
    }

    pub fn feature_len(&self) -> usize {
        self.mean.len()
    }

    /// Raw (unclipped) estimates for a batch of feature rows.
    pub fn predict_features(&self, rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.feature_len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape(format!("feature length {}, predictor expects {d}", r.len())));
        }
        let x = Array::new(vec![rows.len(), d], rows.concat())?;
        let z = infer(&self.net, &self.normalize(&x))?;
        Ok(z.data().chunks(2).map(|c| (c[0], c[1])).collect())
    }

    /// Raw (accuracy, robustness) estimate for one configuration.
    pub fn predict(&self, space: &SearchSpace, config: &ArchConfig) -> Result<(f64, f64)> {
        let f = encode_config(space, config)?;
        if f.len() != self.feature_len() {
            return Err(Error::Shape(format!("space encodes {} features, predictor expects {}", f.len(), self.feature_len())));
        }
        Ok(self.predict_features(&[f])?[0])
    }

    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        if feature_len(space) != self.feature_len() {
            return Err(Error::ConfigMismatch(format!(
                "space encodes {} features, predictor expects {}",
                feature_len(space),
                self.feature_len()
            )));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let meta = serde_json::json!({ "report": self.report, "layers": self.net.layers.len() });
        let mut a = Archive::new(ARCHIVE_KIND, meta);
        a.push("feature_mean", Array::from_vec(self.mean.clone()));
        a.push("feature_scale", Array::from_vec(self.scale.clone()));
        for (n, arr) in self.net.named_params() {
            a.push(n, arr.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(ARCHIVE_KIND)?;
        let bad = |m: &str| Error::Format(format!("predictor archive: {m}"));
        let report: TrainingReport =
            serde_json::from_value(a.meta["report"].clone()).map_err(|e| bad(&e.to_string()))?;
        let n = a.meta["layers"].as_u64().ok_or_else(|| bad("layer count"))? as usize;
        let get = |name: &str| a.get(name).cloned().ok_or_else(|| bad(&format!("missing {name}")));
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let weight = get(&Mlp::param_name(i, false))?;
            let bias = get(&Mlp::param_name(i, true))?;
            if weight.ndim() != 2 || bias.shape() != [weight.shape()[0]] {
                return Err(bad("layer shapes"));
            }
            layers.push(Dense { weight, bias });
        }
        let net = Mlp::new(layers)?;
        let mean = get("feature_mean")?.into_data();
        let scale = get("feature_scale")?.into_data();
        if net.layers.first().map(Dense::inputs) != Some(mean.len())
            || scale.len() != mean.len()
            || net.layers.last().map(Dense::outputs) != Some(2)
        {
            return Err(bad("inconsistent shapes"));
        }
        Ok(Self { net, mean, scale, report })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Estimates clipped to `[0, 1]`, for display.
pub fn clip_unit((a, r): (f64, f64)) -> (f64, f64) {
    (a.clamp(0.0, 1.0), r.clamp(0.0, 1.0))
}

/// Root mean squared error of each output over `rows`.
pub fn rmse(p: &Predictor, rows: &[EvalRow]) -> Result<(f64, f64)> {
    if rows.is_empty() {
        return Err(Error::Empty("rows".into()));
    }
    let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
    let preds = p.predict_features(&feats)?;
    Ok(rmse_of(&preds, rows))
}

/// RMSE of given predictions against the rows' targets.
pub fn rmse_of(preds: &[(f64, f64)], rows: &[EvalRow]) -> (f64, f64) {
    let n = rows.len() as f64;
    let (mut a, mut r) = (0.0, 0.0);
    for (p, row) in preds.iter().zip(rows) {
        a += (p.0 - row.natural).powi(2);
        r += (p.1 - row.robust).powi(2);
    }
    ((a / n).sqrt(), (r / n).sqrt())
}

/// Seed for a predictor trained within a run rooted at `root`.
pub fn predictor_seed(root: u64) -> u64 {
    derive_seed(root, "predictor")
}
