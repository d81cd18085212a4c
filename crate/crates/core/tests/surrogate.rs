mod common;

use common::{rng, tiny_space};
use elastic_ard::advkit::{evaluate, AttackSpec};
use elastic_ard::data::{gaussian_mixture, Dataset, MixtureSpec};
use elastic_ard::dynet::{encode_config, recalibrate_bn, SharedWeights, StaticBn, StaticNet};
use elastic_ard::surrogate::{
    build_eval_dataset, eval_rows, rmse, rmse_of, train_predictor, EvalRow, Predictor, PredictorSpec,
};
use proptest::prelude::*;
use rand::Rng;

fn rows_from(f: impl Fn(&[f64]) -> (f64, f64), n: usize, d: usize, seed: u64) -> Vec<EvalRow> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            let (natural, robust) = f(&x);
            EvalRow { features: x, natural, robust, flops: 0 }
        })
        .collect()
}

fn setup() -> (SharedWeights, Dataset) {
    let space = tiny_space();
    let shared = SharedWeights::init(&space, &mut rng(3)).unwrap();
    let spec = MixtureSpec { examples: 60, classes: 3, shape: space.input, separation: 0.8, noise: 0.2 };
    (shared, gaussian_mixture(&spec, &mut rng(4)).unwrap())
}

#[test]
fn full_network_row_matches_direct_evaluation() {
    let (shared, data) = setup();
    let space = shared.space().clone();
    let attack = AttackSpec::fgsm(0.05);
    let max = space.max_config();
    let (_, row) = eval_rows(&shared, &[max.clone()], &data, &data, &attack, 0).unwrap().remove(0);

    let stats = recalibrate_bn(&shared, &max, &[data.inputs().clone()]).unwrap();
    let net = StaticNet::materialize(&shared, &max, Some(&stats)).unwrap().with_mode(StaticBn::Stored);
    let direct = evaluate(&net, &data, &[attack], 60, &mut rng(0)).unwrap();
    assert!((row.natural - direct.natural).abs() < 1e-12);
    assert!((row.robust - direct.robust[0].1).abs() < 1e-12);
    assert_eq!(row.features, encode_config(&space, &max).unwrap());
}

#[test]
fn duplicate_configs_score_identically_and_rows_reproduce() {
    let (shared, data) = setup();
    let attack = AttackSpec::pgd(0.05, 3, 0.02, true);
    let c = shared.space().max_config();
    let rows = eval_rows(&shared, &[c.clone(), c], &data, &data, &attack, 7).unwrap();
    assert_eq!(rows[0].1, rows[1].1);
    let a = build_eval_dataset(&shared, 5, &data, &data, &attack, 9).unwrap();
    let b = build_eval_dataset(&shared, 5, &data, &data, &attack, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|(_, r)| (0.0..=1.0).contains(&r.natural) && r.flops > 0));
    assert!(build_eval_dataset(&shared, 0, &data, &data, &attack, 9).is_err());
}

#[test]
fn constant_targets_are_reproduced() {
    let rows = rows_from(|_| (0.42, 0.17), 50, 4, 1);
    let p = train_predictor(&rows, &PredictorSpec::default()).unwrap();
    let (a, r) = p.report.val_rmse.unwrap();
    assert!(a < 1e-3 && r < 1e-3, "{a} {r}");
}

#[test]
fn linear_targets_are_fitted() {
    let f = |x: &[f64]| (0.2 + 0.3 * x[0] - 0.1 * x[1], 0.1 + 0.2 * x[2] + 0.05 * x[3]);
    let rows = rows_from(f, 400, 4, 2);
    let spec = PredictorSpec { epochs: 60, ..PredictorSpec::default() };
    let p = train_predictor(&rows, &spec).unwrap();
    let test = rows_from(f, 200, 4, 3);
    let (a, r) = rmse(&p, &test).unwrap();
    assert!(a < 1e-2 && r < 1e-2, "{a} {r}");
}

#[test]
fn smooth_targets_generalize() {
    let f = |x: &[f64]| (0.5 + 0.3 * (2.0 * x[0]).sin() * x[1], 0.3 + 0.2 * x[2] * x[2] - 0.1 * x[3] * x[0]);
    let rows = rows_from(f, 500, 6, 4);
    let p = train_predictor(&rows, &PredictorSpec::default()).unwrap();
    let (a, r) = p.report.val_rmse.unwrap();
    assert!(a <= 0.05 && r <= 0.05, "{a} {r}");
    let tail = &p.report.train_loss[p.report.train_loss.len() - 5..];
    assert!(tail.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{tail:?}");
}

#[test]
fn training_is_deterministic_and_persists() {
    let rows = rows_from(|x| (x[0], x[1]), 40, 3, 5);
    let spec = PredictorSpec { epochs: 5, ..PredictorSpec::default() };
    let a = train_predictor(&rows, &spec).unwrap();
    assert_eq!(a, train_predictor(&rows, &spec).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    a.save(&path).unwrap();
    assert_eq!(Predictor::load(&path).unwrap(), a);
}

#[test]
fn predictions_on_training_configs_stay_within_residual_bound() {
    let space = tiny_space();
    let configs = space.enumerate(1000).unwrap();
    let rows: Vec<EvalRow> = configs
        .iter()
        .map(|c| {
            let features = encode_config(&space, c).unwrap();
            let s: f64 = features.iter().sum::<f64>() / features.len() as f64;
            EvalRow { features, natural: 0.3 + 0.4 * s, robust: 0.1 + 0.2 * s * s, flops: 0 }
        })
        .collect();
    let p = train_predictor(&rows, &PredictorSpec { val_fraction: 0.0, ..PredictorSpec::default() }).unwrap();
    let preds = p.predict_features(&rows.iter().map(|r| r.features.clone()).collect::<Vec<_>>()).unwrap();
    let bound = preds
        .iter()
        .zip(&rows)
        .map(|(q, r)| (q.0 - r.natural).abs().max((q.1 - r.robust).abs()))
        .fold(0.0, f64::max);
    for (c, r) in configs.iter().zip(&rows) {
        let (a, b) = p.predict(&space, c).unwrap();
        assert_eq!((a, b), p.predict(&space, c).unwrap());
        assert!((a - r.natural).abs() <= bound && (b - r.robust).abs() <= bound);
    }
    assert!(p.predict_features(&[vec![0.0; 3]]).is_err());
}

#[test]
fn rmse_matches_direct_formula() {
    let rows: Vec<EvalRow> = [(0.5, 0.2), (0.7, 0.4), (0.1, 0.9)]
        .iter()
        .map(|&(n, r)| EvalRow { features: vec![0.0], natural: n, robust: r, flops: 0 })
        .collect();
    let preds = [(0.6, 0.2), (0.7, 0.1), (0.4, 0.5)];
    let (a, r) = rmse_of(&preds, &rows);
    assert!((a - ((0.01 + 0.0 + 0.09) / 3.0f64).sqrt()).abs() < 1e-12);
    assert!((r - ((0.0 + 0.09 + 0.16) / 3.0f64).sqrt()).abs() < 1e-12);
    let (e1, e2) = rmse_of(&[(0.8, 0.5)], &rows[..1]);
    assert!((e1 - 0.3).abs() < 1e-12 && (e2 - 0.3).abs() < 1e-12);
    assert_eq!(rmse_of(&[(0.5, 0.2)], &rows[..1]), (0.0, 0.0));
}

#[test]
fn degenerate_inputs_are_rejected() {
    let rows = rows_from(|_| (0.5, 0.5), 2, 2, 6);
    assert!(train_predictor(&rows[..1], &PredictorSpec::default()).is_err());
    assert!(train_predictor(&rows, &PredictorSpec { val_fraction: 0.1, ..PredictorSpec::default() }).is_err());
    let p = train_predictor(&rows_from(|_| (0.5, 0.5), 10, 2, 7), &PredictorSpec::default()).unwrap();
    assert!(rmse(&p, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rmse_ignores_row_order(vals in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..20), seed in 0u64..1000) {
        let rows: Vec<EvalRow> = vals.iter().map(|v| EvalRow { features: vec![], natural: v.0, robust: v.1, flops: 0 }).collect();
        let preds: Vec<(f64, f64)> = vals.iter().map(|v| (v.2, v.3)).collect();
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng(seed));
        let r2: Vec<EvalRow> = idx.iter().map(|&i| rows[i].clone()).collect();
        let p2: Vec<(f64, f64)> = idx.iter().map(|&i| preds[i]).collect();
        let (a, b) = rmse_of(&preds, &rows);
        let (c, d) = rmse_of(&p2, &r2);
        prop_assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
    }
}
