//! Acceptance suite: one PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use elastic_ard::advkit::{attack, fgsm, rslad_outer, AttackSpec, Objective};
use elastic_ard::autodiff::{grad_check, infer, Primitive, Tape};
use elastic_ard::dynet::{
    all_dims, count_flops, encode_config, extract_subnet, from_genotype, gene_sizes, BnMode, SearchSpace, SharedWeights,
    StageSpec, StaticBn, StaticNet, StemSpec,
};
use elastic_ard::evo::{dominates, fast_nondominated_sort, search, Individual, SearchConfig};
use elastic_ard::rng::component_rng;
use elastic_ard::surrogate::{train_predictor, EvalRow, Predictor, PredictorSpec};
use elastic_ard::Array;
use elastic_ard_cli::csvio::{read_scatter, ScatterRow};
use elastic_ard_cli::{parse_config, Pipeline, RunConfig};
use rand::Rng;

const DESK: &str = include_str!("../../../configs/desk.toml");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stage(channels: usize, stride: usize, depth: usize, kernels: Option<Vec<usize>>) -> StageSpec {
    StageSpec {
        channels,
        stride,
        max_depth: depth,
        depth_choices: (1..=depth).collect(),
        width_choices: vec![0.5, 1.0],
        expansion_choices: vec![0.5, 1.0],
        kernel_choices: kernels,
        kernel: 3,
    }
}

fn conv_space() -> SearchSpace {
    SearchSpace {
        input: [3, 8, 8],
        classes: 5,
        stem: StemSpec { channels: 4, kernel: 3 },
        stages: vec![stage(6, 1, 2, Some(vec![1, 3, 5])), stage(8, 2, 2, None)],
    }
}

fn toy_dense_space() -> SearchSpace {
    let s = |c| StageSpec { kernel: 1, ..stage(c, 1, 2, None) };
    SearchSpace { input: [3, 1, 1], classes: 3, stem: StemSpec { channels: 4, kernel: 1 }, stages: vec![s(4), s(6)] }
}

fn uniform(shape: Vec<usize>, seed: u64) -> Array {
    let mut r = component_rng(seed, "acceptance-input");
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let mut rng = component_rng(1, "gradcheck");
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for p in Primitive::ALL {
        for _ in 0..20 {
            let r = grad_check(p, &p.sample_point(&mut rng), 1e-4);
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, r.primitive);
            }
            if !r.passed {
                failures.push(r.primitive);
            }
        }
    }
    failures.dedup();
    check(
        failures.is_empty(),
        format!("{} primitives x 20 points, worst relative error {:.2e} ({}), failing {failures:?}", Primitive::ALL.len(), worst.0, worst.1),
    )
}

fn cardinality() -> Outcome {
    let count = SearchSpace::resnet_like().cardinality().to_string();
    let expected = 7371u128.pow(5).to_string();
    let mut ok = count == expected;
    let mut detail = format!("resnet-like space: {count} (7371^5 = {expected})");
    for (name, space) in [("conv toy", conv_space()), ("dense toy", toy_dense_space())] {
        let listed = space.enumerate(10_000).unwrap().len();
        let count = space.cardinality().to_string();
        ok &= count == listed.to_string();
        detail += &format!("; {name}: {count} counted, {listed} enumerated");
    }
    check(ok, detail)
}

fn weight_sharing() -> Outcome {
    let space = conv_space();
    let shared = SharedWeights::init(&space, &mut component_rng(2, "init")).unwrap();
    let x = uniform(vec![4, 3, 8, 8], 3);
    let mut rng = component_rng(4, "configs");
    let mut mismatches = 0;
    for _ in 0..100 {
        let c = space.sample_config(&all_dims(), &mut rng);
        let copy = StaticNet::materialize(&shared, &c, None).unwrap();
        for (view_mode, copy_mode) in [(BnMode::Running, StaticBn::Stored), (BnMode::Batch, StaticBn::Batch)] {
            let v = infer(&extract_subnet(&shared, &c, view_mode).unwrap(), &x).unwrap();
            let m = infer(&copy.clone().with_mode(copy_mode), &x).unwrap();
            mismatches += usize::from(v.data() != m.data());
        }
    }
    let max = space.max_config();
    let full = StaticNet::materialize(&shared, &max, None).unwrap();
    let same_params = &full.params == shared.params();
    let same_out = infer(&extract_subnet(&shared, &max, BnMode::Running).unwrap(), &x).unwrap().data()
        == infer(&full.with_mode(StaticBn::Stored), &x).unwrap().data();
    check(
        mismatches == 0 && same_params && same_out,
        format!("100 configs x 2 normalization modes: {mismatches} mismatches; max config equals full network: {}", same_params && same_out),
    )
}

fn attack_soundness() -> Outcome {
    let space = conv_space();
    let shared = SharedWeights::init(&space, &mut component_rng(5, "init")).unwrap();
    let net = extract_subnet(&shared, &space.max_config(), BnMode::Running).unwrap();
    let mut rng = component_rng(6, "attacks");
    let (mut inputs, mut violations, mut fgsm_mismatch) = (0, 0, 0);
    for b in 0..50u64 {
        let x = uniform(vec![20, 3, 8, 8], 100 + b);
        let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..space.classes)).collect();
        let eps = rng.random_range(0.0..0.1);
        let spec = if rng.random_bool(0.3) {
            AttackSpec::fgsm(eps)
        } else {
            let steps = rng.random_range(1..6);
            AttackSpec::pgd(eps, steps, rng.random_range(0.001..0.05), rng.random_bool(0.5))
        };
        let adv = attack(&net, &x, Objective::CrossEntropy(&labels), &spec, &mut rng).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            violations += usize::from((a - o).abs() > eps || !(0.0..=1.0).contains(a));
        }
        inputs += 20;
        let one = AttackSpec::pgd(eps, 1, eps.max(1e-9), false);
        let p = attack(&net, &x, Objective::CrossEntropy(&labels), &one, &mut rng).unwrap();
        let f = fgsm(&net, &x, Objective::CrossEntropy(&labels), eps).unwrap();
        fgsm_mismatch += usize::from(eps > 0.0 && p.data() != f.data());
    }
    check(
        violations == 0 && fgsm_mismatch == 0,
        format!("{inputs} inputs: {violations} bound violations, {fgsm_mismatch} single-step PGD/FGSM mismatches"),
    )
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let soft = |z: &[f64]| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (a, b) = (soft(p), soft(q));
    a.iter().zip(&b).map(|(x, y)| x * (x / y).ln()).sum()
}

fn loss_correctness() -> Outcome {
    let t = uniform(vec![3, 4], 7).map(|v| 4.0 * v - 2.0);
    let s = uniform(vec![3, 4], 8).map(|v| 4.0 * v - 2.0);
    let sa = uniform(vec![3, 4], 9).map(|v| 4.0 * v - 2.0);
    let run = |clean: &Array, adv: &Array, alpha: f64| {
        let mut tape = Tape::new();
        let c = tape.input(clean.clone(), true).unwrap();
        let a = tape.input(adv.clone(), true).unwrap();
        let l = rslad_outer(&mut tape, c, a, &t, alpha).unwrap();
        (tape.value(l.loss).item(), tape.value(l.natural).item(), tape.value(l.robust).item())
    };
    let zero = run(&t, &t, 0.9).0;
    let (l1, _, r1) = run(&s, &sa, 1.0);
    let (l0, n0, _) = run(&s, &sa, 0.0);
    let rows = |a: &Array, b: &Array| -> f64 {
        a.data().chunks(4).zip(b.data().chunks(4)).map(|(x, y)| kl_oracle(x, y)).sum::<f64>() / 3.0
    };
    let kl_err = (r1 - rows(&sa, &t)).abs().max((n0 - rows(&s, &t)).abs());

    let labels = [2usize, 0, 3];
    let mut tape = Tape::new();
    let z = tape.input(s.clone(), false).unwrap();
    let ce = tape.cross_entropy(z, &labels).unwrap();
    let ce_val = tape.value(ce).item();
    let oracle: f64 = s
        .data()
        .chunks(4)
        .zip(labels)
        .map(|(row, l)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[l])
        .sum::<f64>()
        / 3.0;
    let ce_err = (ce_val - oracle).abs();
    check(
        zero == 0.0 && l1 == r1 && l0 == n0 && kl_err < 1e-12 && ce_err < 1e-12,
        format!("equal logits loss {zero}; alpha=1 and alpha=0 reductions exact: {}; KL error {kl_err:.1e}, CE error {ce_err:.1e}", l1 == r1 && l0 == n0),
    )
}

fn brute_fronts(pop: &[Individual]) -> Vec<Vec<usize>> {
    let mut left: Vec<usize> = (0..pop.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let f: Vec<usize> =
            left.iter().copied().filter(|&i| !left.iter().any(|&j| dominates(&pop[j], &pop[i]).unwrap())).collect();
        left.retain(|i| !f.contains(i));
        out.push(f);
    }
    out
}

fn all_genotypes(sizes: &[usize]) -> Vec<Vec<usize>> {
    sizes.iter().fold(vec![vec![]], |acc, &s| {
        acc.into_iter().flat_map(|g| (0..s).map(move |v| [g.clone(), vec![v]].concat())).collect()
    })
}

fn individual(space: &SearchSpace, p: &Predictor, genes: Vec<usize>, limit: f64) -> Individual {
    let c = from_genotype(space, &genes).unwrap();
    let (a, r) = p.predict(space, &c).unwrap();
    let mflops = count_flops(space, &c, space.input).unwrap().mflops();
    Individual { genes, objectives: vec![a, r], mflops, violation: (mflops - limit).max(0.0) }
}

fn nsga_oracle() -> Outcome {
    let mut rng = component_rng(10, "populations");
    let mut agree = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let pop: Vec<Individual> = (0..n)
            .map(|_| Individual {
                genes: vec![],
                objectives: vec![f64::from(rng.random_range(0..8u8)) / 7.0, f64::from(rng.random_range(0..8u8)) / 7.0],
                mflops: 0.0,
                violation: if rng.random_bool(0.25) { rng.random_range(0.0..1.0) } else { 0.0 },
            })
            .collect();
        let fast: Vec<Vec<usize>> = fast_nondominated_sort(&pop)
            .unwrap()
            .into_iter()
            .map(|mut f| {
                f.sort_unstable();
                f
            })
            .collect();
        agree += usize::from(fast == brute_fronts(&pop));
    }

    let space = toy_dense_space();
    let sizes = gene_sizes(&space);
    let configs = space.enumerate(10_000).unwrap();
    let rows: Vec<EvalRow> = configs
        .iter()
        .map(|c| {
            let f = encode_config(&space, c).unwrap();
            let m = f.iter().sum::<f64>() / f.len() as f64;
            EvalRow { natural: 0.5 + 0.4 * m * (2.0 * f[0] - 1.0), robust: 0.6 - 0.3 * m * m, features: f, flops: 0 }
        })
        .collect();
    let p = train_predictor(&rows, &PredictorSpec::default()).unwrap();
    let mut mf: Vec<f64> = configs.iter().map(|c| count_flops(&space, c, space.input).unwrap().mflops()).collect();
    mf.sort_by(f64::total_cmp);
    let limit = mf[mf.len() / 2];
    let fitness = |c: &elastic_ard::dynet::ArchConfig| p.predict(&space, c).map(|(a, r)| vec![a, r]);
    let out = search(&space, &fitness, &SearchConfig { population: 16, ..SearchConfig::new(limit, 0) }).unwrap();
    let everyone: Vec<Individual> = all_genotypes(&sizes).into_iter().map(|g| individual(&space, &p, g, limit)).collect();
    let off_front = out.front.members.iter().filter(|m| everyone.iter().any(|e| dominates(e, m).unwrap())).count();
    check(
        agree == 100 && off_front == 0 && out.history.len() == 101,
        format!(
            "sort agrees with brute force on {agree}/100 populations; {} genotypes enumerated, {off_front} of {} front members dominated",
            everyone.len(),
            out.front.members.len()
        ),
    )
}

fn desk_config(seed: u64, out: &Path) -> RunConfig {
    let mut cfg = parse_config(DESK).unwrap();
    cfg.seed = seed;
    cfg.out_dir = out.to_path_buf();
    cfg
}

struct Paired {
    prog: Vec<ScatterRow>,
    rand: Vec<ScatterRow>,
}

fn paired_run(seed: u64, out: &Path) -> Paired {
    let p = Pipeline::new(desk_config(seed, out).resolve().unwrap()).unwrap();
    p.train_teacher(false).unwrap();
    p.train_progressive(false).unwrap();
    p.train_random(false).unwrap();
    let n = p.run.config.scatter.n;
    p.export_scatter("progressive", n).unwrap();
    p.export_scatter("random", n).unwrap();
    Paired {
        prog: read_scatter(&out.join("scatter_progressive.csv")).unwrap(),
        rand: read_scatter(&out.join("scatter_random.csv")).unwrap(),
    }
}

fn progressive_vs_random(runs: &[Paired]) -> Outcome {
    let mean = |r: &[ScatterRow]| r.iter().map(|x| x.acc + x.rob).sum::<f64>() / r.len() as f64;
    let best = |r: &[ScatterRow]| r.iter().map(|x| x.acc).fold(f64::NEG_INFINITY, f64::max);
    let mut detail = Vec::new();
    let (mut mean_wins, mut best_wins) = (0, 0);
    for (s, run) in runs.iter().enumerate() {
        let (mp, mr, bp, br) = (mean(&run.prog), mean(&run.rand), best(&run.prog), best(&run.rand));
        mean_wins += usize::from(mp > mr);
        best_wins += usize::from(bp > br);
        detail.push(format!("seed {s}: mean acc+rob {mp:.4} vs {mr:.4}, best acc {bp:.3} vs {br:.3}"));
    }
    check(
        mean_wins == 3 && best_wins >= 2,
        format!("progressive mean wins {mean_wins}/3, best-subnet wins {best_wins}/3 ({})", detail.join("; ")),
    )
}

fn predictor_quality(out: &Path) -> Outcome {
    let p = Pipeline::new(desk_config(0, out).resolve().unwrap()).unwrap();
    let rows = p.build_pred_dataset().unwrap();
    let (_, summary) = p.train_predictor().unwrap();
    let (a, r) = summary.report.val_rmse.unwrap();
    check(
        a <= 0.05 && r <= 0.05,
        format!("{} rows ({} held out): RMSE accuracy {a:.4}, robustness {r:.4}", rows.len(), summary.report.val_rows),
    )
}

fn search_improvement(out: &Path) -> Outcome {
    let cfg = desk_config(0, out);
    let space = cfg.space.resolve().unwrap();
    let p = Predictor::load(out.join("predictor.bin")).unwrap();
    let fitness = |c: &elastic_ard::dynet::ArchConfig| p.predict(&space, c).map(|(a, r)| vec![a, r]);
    let mut detail = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let sc = SearchConfig { seed, ..cfg.search.clone() };
        let res = search(&space, &fitness, &sc).unwrap();
        let first = &res.history[0].population;
        let beaten = res.front.members.iter().filter(|m| first.iter().any(|i| dominates(i, m).unwrap())).count();
        let feasible = res.front.members.iter().all(|m| m.mflops <= sc.flops_limit);
        ok &= beaten == 0 && feasible && res.history.len() == sc.generations + 1;
        detail.push(format!("seed {seed}: {beaten} of {} front members dominated by generation 1", res.front.members.len()));
    }
    check(ok, detail.join("; "))
}

fn small_pipeline(out: &Path) {
    let mut cfg = desk_config(7, out);
    cfg.plan.teacher_epochs = 2;
    cfg.plan.phase_epochs = 1;
    cfg.data = elastic_ard_cli::config::DataConfig::Synthetic {
        examples_per_class: 30,
        test_examples: 100,
        separation: 0.8,
        noise: 0.3,
    };
    cfg.predictor.rows = 12;
    cfg.search.generations = 5;
    let p = Pipeline::new(cfg.resolve().unwrap()).unwrap();
    p.train_teacher(false).unwrap();
    p.train_progressive(false).unwrap();
    p.train_random(false).unwrap();
    p.eval_subnet("progressive", "max").unwrap();
    p.export_scatter("progressive", 4).unwrap();
    p.build_pred_dataset().unwrap();
    p.train_predictor().unwrap();
    p.search().unwrap();
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    small_pipeline(a);
    small_pipeline(b);
    let list = |d: &Path| {
        let mut v: Vec<String> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        v.sort();
        v
    };
    let (fa, fb) = (list(a), list(b));
    let differing: Vec<&String> =
        fa.iter().filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok()).collect();
    check(
        fa == fb && differing.is_empty() && fa.len() >= 15,
        format!("{} artifacts compared, differing: {differing:?}", fa.len()),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = t.elapsed().as_secs_f64();
    match &r {
        Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]"),
    }
    r.is_ok()
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let seed_dir = |s: u64| dir.path().join(format!("seed{s}"));
    let mut ok = true;
    ok &= run(1, "gradient fidelity", gradient_fidelity);
    ok &= run(2, "cardinality", cardinality);
    ok &= run(3, "weight-sharing identity", weight_sharing);
    ok &= run(4, "attack soundness", attack_soundness);
    ok &= run(5, "loss correctness", loss_correctness);
    ok &= run(6, "NSGA-II oracle equivalence", nsga_oracle);
    let mut runs = Vec::new();
    let paired_ok = run(8, "progressive vs random sampling", || {
        for s in 0..3 {
            runs.push(paired_run(s, &seed_dir(s)));
        }
        progressive_vs_random(&runs)
    });
    ok &= paired_ok;
    ok &= run(7, "predictor quality", || predictor_quality(&seed_dir(0)));
    ok &= run(9, "search improvement", || search_improvement(&seed_dir(0)));
    ok &= run(10, "end-to-end determinism", || determinism(&dir.path().join("det_a"), &dir.path().join("det_b")));
    if !ok {
        std::process::exit(1);
    }
}
