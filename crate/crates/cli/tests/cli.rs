use std::path::Path;
use std::process::Command;

use elastic_ard::data::{gaussian_mixture, parse_cifar, CifarKind, Dataset, MixtureSpec};
use elastic_ard::rng::component_rng;
use elastic_ard::surrogate::evaluate_subnet;
use elastic_ard::Error;
use elastic_ard_cli::config::DataConfig;
use elastic_ard_cli::csvio::{read_dataset_csv, read_scatter, write_dataset_csv, write_scatter, ScatterRow};
use elastic_ard_cli::{parse_config, CliError, Pipeline, RunConfig};

const DESK: &str = include_str!("../../../configs/desk.toml");

fn tiny_run(out: &Path) -> RunConfig {
    let mut cfg = parse_config(DESK).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.plan.teacher_epochs = 1;
    cfg.plan.phase_epochs = 1;
    cfg.data = DataConfig::Synthetic { examples_per_class: 20, test_examples: 60, separation: 0.8, noise: 0.3 };
    cfg
}

#[test]
fn cifar_records_decode_byte_for_byte() {
    let mut bytes = Vec::new();
    for r in 0..10u8 {
        bytes.push(r);
        bytes.extend((0..3072).map(|i| ((i * 7 + usize::from(r) * 13) % 256) as u8));
    }
    let d = parse_cifar(&bytes, CifarKind::Ten).unwrap();
    assert_eq!(d.len(), 10);
    assert_eq!(d.labels(), (0..10).collect::<Vec<_>>().as_slice());
    assert_eq!(d.example_shape(), [3, 32, 32]);
    let x = d.inputs().data();
    for r in 0..10 {
        for (c, row, col) in [(0, 0, 0), (1, 5, 9), (2, 31, 31)] {
            let byte = c * 1024 + row * 32 + col;
            let want = ((byte * 7 + r * 13) % 256) as f64 / 255.0;
            assert_eq!(x[r * 3072 + byte], want);
        }
    }

    let mut hundred = vec![3u8, 42];
    hundred.extend([255u8; 3072]);
    let d = parse_cifar(&hundred, CifarKind::Hundred).unwrap();
    assert_eq!((d.labels()[0], d.classes()), (42, 100));
    assert!(d.inputs().data().iter().all(|&v| v == 1.0));
}

#[test]
fn cifar_rejects_empty_and_bad_labels() {
    assert!(matches!(parse_cifar(&[], CifarKind::Ten), Err(Error::Empty(_))));
    assert!(matches!(parse_cifar(&[0u8; 100], CifarKind::Ten), Err(Error::Format(_))));
    let mut bad = vec![255u8];
    bad.extend([0u8; 3072]);
    assert!(matches!(parse_cifar(&bad, CifarKind::Ten), Err(Error::LabelRange { label: 255, classes: 10 })));
}

fn mixture(separation: f64, noise: f64, seed: u64) -> Dataset {
    let spec = MixtureSpec { examples: 2000, classes: 10, shape: [3, 4, 4], separation, noise };
    gaussian_mixture(&spec, &mut component_rng(seed, "mixture")).unwrap()
}

/// Nearest-class-mean probe fitted on the first half, scored on the second.
fn probe_accuracy(d: &Dataset) -> f64 {
    let dim = d.inputs().data().len() / d.len();
    let half = d.len() / 2;
    let mut means = vec![vec![0.0; dim]; d.classes()];
    let mut counts = vec![0.0; d.classes()];
    for (x, &l) in d.inputs().data().chunks(dim).zip(d.labels()).take(half) {
        counts[l] += 1.0;
        means[l].iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().zip(&counts).for_each(|(m, c)| m.iter_mut().for_each(|v| *v /= c));
    let hits = d
        .inputs()
        .data()
        .chunks(dim)
        .zip(d.labels())
        .skip(half)
        .filter(|(x, &l)| {
            let dist = |m: &Vec<f64>| m.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..d.classes()).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))) == Some(l)
        })
        .count();
    hits as f64 / (d.len() - half) as f64
}

#[test]
fn mixture_difficulty_tracks_separation() {
    let chance = probe_accuracy(&mixture(0.0, 0.2, 1));
    assert!((chance - 0.1).abs() < 0.05, "{chance}");
    let easy = probe_accuracy(&mixture(3.0, 0.1, 1));
    assert!(easy >= 0.99, "{easy}");
    let (a, b) = (mixture(0.8, 0.3, 5), mixture(0.8, 0.3, 5));
    assert_eq!(a.inputs().data(), b.inputs().data());
    assert_eq!(a.labels(), b.labels());
    assert_ne!(a.inputs().data(), mixture(0.8, 0.3, 6).inputs().data());
}

#[test]
fn csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scatter.csv");
    let row = ScatterRow { config: "d1.w0.5".into(), acc: 0.1 + 0.2, rob: 1.0 / 3.0, flops: 12345 };
    write_scatter(std::slice::from_ref(&row), &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    assert_eq!(read_scatter(&path).unwrap(), vec![row]);
    assert!(matches!(write_scatter(&[], &path), Err(CliError::Config(_))));

    let d = mixture(0.5, 0.2, 3).head(25).unwrap();
    let dpath = dir.path().join("data.csv");
    write_dataset_csv(&d, &dpath).unwrap();
    let back = read_dataset_csv(&dpath, [3, 4, 4], 10).unwrap();
    assert_eq!(back.inputs().data(), d.inputs().data());
    assert_eq!(back.labels(), d.labels());
    assert!(read_dataset_csv(&dpath, [3, 4, 5], 10).is_err());
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_elastic-ard");
    let cases = [
        DESK.replace("flops_limit = 0.05", "flops_limit = -1.0"),
        DESK.replace("beta = 6.0", "beta = 6.0\nbogus = 1"),
        "seed = \"zero\"".to_string(),
    ];
    for (i, text) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let out = Command::new(bin)
            .args(["--config", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap(), "search"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "case {i}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = Command::new(bin).args(["--config", "/nonexistent/run.toml", "search"]).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn eval_and_scatter_commands() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_run(dir.path()).resolve().unwrap()).unwrap();
    p.train_teacher(false).unwrap();
    let summary = p.eval_subnet("teacher", "max").unwrap();
    let shared = p.load_weights("teacher").unwrap();
    let space = &p.run.space;
    let direct =
        evaluate_subnet(&shared, &space.max_config(), &p.run.train, &p.run.test, &p.run.config.attacks.eval, p.run.config.seed)
            .unwrap();
    assert_eq!(summary.result, direct);
    assert!(dir.path().join("eval_teacher.json").exists());

    let (rows, s) = p.export_scatter("teacher", 5).unwrap();
    assert_eq!(rows.len(), 5);
    let text = std::fs::read_to_string(dir.path().join(&s.file)).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(read_scatter(&dir.path().join(&s.file)).unwrap(), rows);
    assert!(matches!(p.eval_subnet("teacher", "not-a-config"), Err(CliError::Config(_))));
}

#[test]
fn shipped_configs_parse() {
    let cifar = parse_config(include_str!("../../../configs/cifar10-resnet.toml")).unwrap();
    assert_eq!(cifar.space.resolve().unwrap(), elastic_ard::dynet::SearchSpace::resnet_like());
    let desk = parse_config(DESK).unwrap();
    desk.resolve().unwrap();
}
