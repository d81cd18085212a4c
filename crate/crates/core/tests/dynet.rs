mod common;

use std::collections::HashMap;

use common::{conv_space, random_batch, rng, tiny_space};
use elastic_ard::autodiff::{infer, Model, Tape};
use elastic_ard::dynet::*;
use elastic_ard::Array;
use proptest::prelude::*;

fn shared(space: &SearchSpace, seed: u64) -> SharedWeights {
    SharedWeights::init(space, &mut rng(seed)).unwrap()
}

fn perturb_bn(w: &mut SharedWeights, seed: u64) {
    use rand::Rng;
    let mut r = rng(seed);
    let names: Vec<String> = w.params().keys().filter(|n| n.ends_with("gamma") || n.ends_with("beta")).cloned().collect();
    for n in names {
        for v in w.param_mut(&n).unwrap().data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn max_config_takes_largest_choice_everywhere() {
    let s = SearchSpace::resnet_like();
    let c = s.max_config();
    for st in &c.stages {
        assert_eq!(st.depth, 4);
        assert!(st.layers.iter().all(|l| l.width == 1.0 && l.expansion == 0.35));
    }
}

#[test]
fn max_config_view_equals_full_network_bitwise() {
    let s = conv_space();
    let w = shared(&s, 3);
    let x = random_batch(&s, 3, 4);
    let full = StaticNet::materialize(&w, &s.max_config(), None).unwrap();
    // the materialized max network holds every array of the store unchanged
    for (n, a) in &full.params {
        assert_eq!(a, w.param(n).unwrap(), "{n}");
    }
    let view = extract_subnet(&w, &s.max_config(), BnMode::Running).unwrap();
    assert_eq!(infer(&view, &x).unwrap(), infer(&full, &x).unwrap());
}

#[test]
fn view_equals_materialized_copy_for_every_sampled_config() {
    let s = conv_space();
    let mut w = shared(&s, 5);
    perturb_bn(&mut w, 6);
    let x = random_batch(&s, 4, 7);
    let mut r = rng(8);
    for _ in 0..25 {
        let c = s.sample_config(&all_dims(), &mut r);
        let copy = StaticNet::materialize(&w, &c, None).unwrap();
        let view = extract_subnet(&w, &c, BnMode::Running).unwrap();
        assert_eq!(infer(&view, &x).unwrap(), infer(&copy, &x).unwrap(), "{c}");
        let view = view.with_mode(BnMode::Batch);
        let copy = copy.with_mode(StaticBn::Batch);
        assert_eq!(infer(&view, &x).unwrap(), infer(&copy, &x).unwrap(), "{c}");
    }
}

#[test]
fn width_half_of_four_channels_keeps_first_two() {
    assert_eq!(scaled_channels(0.5, 4), 2);
    assert_eq!(scaled_channels(0.65, 64), 42);
    assert_eq!(scaled_channels(0.35, 64), 23);
    let s = tiny_space();
    let w = shared(&s, 1);
    let mut c = s.max_config();
    c.stages[0].layers[0].width = 0.5;
    let net = StaticNet::materialize(&w, &c, None).unwrap();
    let conv3 = &net.params["s0.b0.conv3"];
    assert_eq!(conv3.shape(), &[2, 4, 1, 1]);
    assert_eq!(conv3.data(), &w.param("s0.b0.conv3").unwrap().data()[..8]);
}

#[test]
fn kernel_crop_is_centered() {
    let s = conv_space();
    let w = shared(&s, 2);
    let mut c = s.max_config();
    c.stages[0].layers[1].kernel = 3;
    let net = StaticNet::materialize(&w, &c, None).unwrap();
    let small = &net.params["s0.b1.conv2"];
    let big = w.param("s0.b1.conv2").unwrap();
    assert_eq!(small.shape()[2..], [3, 3]);
    let mid = big.shape()[0];
    // element (o, i, a, b) of the crop is (o, i, a+1, b+1) of the 5×5 kernel
    for o in 0..mid {
        for i in 0..mid {
            for a in 0..3 {
                for b in 0..3 {
                    let got = small.data()[((o * mid + i) * 3 + a) * 3 + b];
                    let want = big.data()[((o * mid + i) * 5 + a + 1) * 5 + b + 1];
                    assert_eq!(got, want);
                }
            }
        }
    }
}

#[test]
fn gradients_touch_only_sliced_regions() {
    let s = conv_space();
    let w = shared(&s, 9);
    let x = random_batch(&s, 2, 10);
    let mut r = rng(11);
    for _ in 0..10 {
        let c = s.sample_config(&all_dims(), &mut r);
        let view = extract_subnet(&w, &c, BnMode::Batch).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x.clone(), false).unwrap();
        let z = view.forward(&mut tape, xv).unwrap();
        let loss = tape.cross_entropy(z, &[0, 1]).unwrap();
        let g = tape.backward_scalar(loss).unwrap();
        let pl = plan(&s, &c).unwrap();
        for (name, full) in w.params() {
            let Some(grad) = g.param(name) else {
                // only dropped blocks may be absent
                let block = name.split('.').take(2).collect::<Vec<_>>().join(".");
                assert!(pl.blocks.iter().all(|b| b.prefix() != block), "{name} missing");
                continue;
            };
            assert_eq!(grad.shape(), full.shape());
            let mask = g.active_mask(name).unwrap();
            for (v, &m) in grad.data().iter().zip(mask) {
                if !m {
                    assert_eq!(*v, 0.0, "{name}");
                }
            }
        }
        // the region mask of the first conv matches the configuration's channel counts
        let b0 = &pl.blocks[0];
        let mask = g.active_mask("s0.b0.conv1").unwrap();
        let cin = w.param("s0.b0.conv1").unwrap().shape()[1];
        let active = mask.iter().filter(|&&m| m).count();
        assert_eq!(active, b0.mid * b0.cin);
        assert!(mask[..cin * b0.mid].iter().all(|&m| m));
    }
}

#[test]
fn cardinality_matches_enumeration() {
    for s in [tiny_space(), {
        let mut s = conv_space();
        s.stages[0].depth_choices = vec![1, 2];
        s.stages[0].width_choices = vec![1.0];
        s.stages[0].kernel_choices = Some(vec![3, 5]);
        s
    }] {
        let all = s.enumerate(10_000).unwrap();
        assert_eq!(s.cardinality(), num_bigint::BigUint::from(all.len()));
        let distinct: std::collections::HashSet<String> = all.iter().map(|c| c.to_string()).collect();
        assert_eq!(distinct.len(), all.len());
    }
    let mut one = tiny_space();
    one.stages.truncate(1);
    one.stages[0].depth_choices = vec![1];
    one.stages[0].width_choices = vec![1.0];
    one.stages[0].expansion_choices = vec![1.0];
    assert_eq!(one.cardinality(), num_bigint::BigUint::from(1u32));
}

#[test]
fn encoding_round_trips_over_the_whole_tiny_space() {
    let s = tiny_space();
    let all = s.enumerate(10_000).unwrap();
    let mut seen = std::collections::HashSet::new();
    for c in &all {
        let v = encode_config(&s, c).unwrap();
        assert_eq!(v.len(), feature_len(&s));
        assert_eq!(&decode_config(&s, &v).unwrap(), c);
        assert!(seen.insert(v.iter().map(|b| *b as u8).collect::<Vec<_>>()));
    }
}

#[test]
fn phase_one_sampling_fixes_depth_and_expansion() {
    let s = SearchSpace::resnet_like();
    let free: DimSet = [Dim::Width].into();
    let mut r = rng(12);
    for _ in 0..200 {
        let c = s.sample_config(&free, &mut r);
        for st in &c.stages {
            assert_eq!(st.depth, 4);
            assert!(st.layers.iter().all(|l| l.expansion == 0.35));
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let s = conv_space();
    let a: Vec<_> = { let mut r = rng(3); (0..20).map(|_| s.sample_config(&all_dims(), &mut r)).collect() };
    let b: Vec<_> = { let mut r = rng(3); (0..20).map(|_| s.sample_config(&all_dims(), &mut r)).collect() };
    assert_eq!(a, b);
}

#[test]
fn free_sampling_is_uniform_per_slot() {
    let s = SearchSpace::resnet_like();
    let n = 10_000;
    let mut r = rng(13);
    let mut depth: HashMap<(usize, usize), usize> = HashMap::new();
    let mut width: HashMap<(usize, u64), usize> = HashMap::new();
    let mut first_layers = 0usize;
    for _ in 0..n {
        let c = s.sample_config(&all_dims(), &mut r);
        for (i, st) in c.stages.iter().enumerate() {
            *depth.entry((i, st.depth)).or_default() += 1;
        }
        *width.entry((0, c.stages[0].layers[0].width.to_bits())).or_default() += 1;
        first_layers += 1;
    }
    // multinomial: each cell ~ Binomial(n, 1/k); accept within 3σ
    let within = |count: usize, total: usize, k: usize| {
        let p = 1.0 / k as f64;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - total as f64 * p).abs() <= 3.0 * sd
    };
    for (_, &c) in &depth {
        assert!(within(c, n, 3), "{depth:?}");
    }
    assert_eq!(width.len(), 3);
    for (_, &c) in &width {
        assert!(within(c, first_layers, 3), "{width:?}");
    }
}

fn flops(s: &SearchSpace, c: &ArchConfig) -> FlopsReport {
    count_flops(s, c, s.input).unwrap()
}

#[test]
fn resnet_space_max_config_is_costed() {
    let s = SearchSpace::resnet_like();
    let r = flops(&s, &s.max_config());
    assert_eq!(r.flops, 2 * r.macs);
    assert!(r.macs > 0 && r.params > 0);
    let w = shared(&s, 0);
    let net = StaticNet::materialize(&w, &s.max_config(), None).unwrap();
    assert_eq!(r.params as usize, net.param_count());
}

#[test]
fn param_count_matches_materialized_copy() {
    let s = conv_space();
    let w = shared(&s, 14);
    let mut r = rng(15);
    for _ in 0..20 {
        let c = s.sample_config(&all_dims(), &mut r);
        let net = StaticNet::materialize(&w, &c, None).unwrap();
        assert_eq!(flops(&s, &c).params as usize, net.param_count());
    }
}

fn arb_config(s: SearchSpace) -> impl Strategy<Value = (SearchSpace, ArchConfig)> {
    any::<u64>().prop_map(move |seed| {
        let c = s.sample_config(&all_dims(), &mut rng(seed));
        (s.clone(), c)
    })
}

fn bump<T: PartialEq + Copy>(choices: &[T], v: T) -> Option<T> {
    let i = choices.iter().position(|&c| c == v)?;
    choices.get(i + 1).copied()
}

proptest! {
    #[test]
    fn flops_monotone_in_every_dimension((s, c) in arb_config(conv_space()), stage in 0usize..2, layer in 0usize..3) {
        let base = flops(&s, &c);
        let st = &s.stages[stage];
        let l = layer.min(c.stages[stage].depth - 1);
        let cur = c.stages[stage].layers[l];
        let mut variants = Vec::new();
        if let Some(w) = bump(&st.width_choices, cur.width) {
            let mut d = c.clone(); d.stages[stage].layers[l].width = w; variants.push(d);
        }
        if let Some(e) = bump(&st.expansion_choices, cur.expansion) {
            let mut d = c.clone(); d.stages[stage].layers[l].expansion = e; variants.push(d);
        }
        if let Some(k) = bump(&st.kernels(), cur.kernel) {
            let mut d = c.clone(); d.stages[stage].layers[l].kernel = k; variants.push(d);
        }
        if let Some(dep) = bump(&st.depth_choices, c.stages[stage].depth) {
            // the extra block repeats the stage's widest layer
            let mut d = c.clone();
            let mut extra = *d.stages[stage].layers.last().unwrap();
            extra.width = st.max_width();
            d.stages[stage].depth = dep;
            d.stages[stage].layers.push(extra);
            prop_assert!(flops(&s, &d).flops > base.flops);
            variants.push(d);
        }
        for v in variants {
            let r = flops(&s, &v);
            prop_assert!(r.flops >= base.flops && r.params >= base.params, "{} -> {}", c, v);
        }
    }
}

#[test]
fn recalibration_with_constant_inputs_gives_zero_variance() {
    // 1×1 spatial input: zero padding cannot make the feature maps vary
    let s = tiny_space();
    let w = shared(&s, 16);
    let x = Array::full(&[4, 2, 1, 1], 0.7);
    let stats = recalibrate_bn(&w, &s.max_config(), &[x]).unwrap();
    for (name, (_, var)) in &stats.layers {
        assert!(var.iter().all(|&v| v.abs() < 1e-12), "{name}: {var:?}");
    }
}

#[test]
fn recalibration_is_idempotent_and_leaves_weights_alone() {
    let s = conv_space();
    let w = shared(&s, 17);
    let before = w.clone();
    let batches = vec![random_batch(&s, 5, 1), random_batch(&s, 3, 2)];
    let c = s.sample_config(&all_dims(), &mut rng(18));
    let a = recalibrate_bn(&w, &c, &batches).unwrap();
    let b = recalibrate_bn(&w, &c, &batches).unwrap();
    assert_eq!(a, b);
    assert_eq!(w, before);
    assert!(recalibrate_bn(&w, &c, &[]).is_err());
}

#[test]
fn recalibrated_stats_pool_batches_exactly() {
    // stem statistics depend only on the stem conv, so pooled moments over
    // two batches must equal the moments of their concatenation
    let s = conv_space();
    let w = shared(&s, 19);
    let a = random_batch(&s, 3, 20);
    let b = random_batch(&s, 5, 21);
    let mut joined = a.data().to_vec();
    joined.extend_from_slice(b.data());
    let joined = Array::new(vec![8, 3, 6, 6], joined).unwrap();
    let c = s.max_config();
    let split = recalibrate_bn(&w, &c, &[a, b]).unwrap();
    let whole = recalibrate_bn(&w, &c, &[joined]).unwrap();
    let (m1, v1) = split.get("stem.bn").unwrap();
    let (m2, v2) = whole.get("stem.bn").unwrap();
    for (x, y) in m1.iter().zip(m2).chain(v1.iter().zip(v2)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn running_stats_converge_to_recalibrated_stats_on_max_config() {
    let s = conv_space();
    let mut w = shared(&s, 22);
    let x = random_batch(&s, 16, 23);
    let c = s.max_config();
    for _ in 0..100 {
        let view = extract_subnet(&w, &c, BnMode::Batch).unwrap();
        let mut tape = Tape::without_param_grads();
        let xv = tape.input(x.clone(), false).unwrap();
        view.forward(&mut tape, xv).unwrap();
        let m = tape.take_moments();
        w.update_running_stats(&m, BN_MOMENTUM).unwrap();
    }
    let stats = recalibrate_bn(&w, &c, &[x]).unwrap();
    for (name, (mean, var)) in &stats.layers {
        let rm = w.buffer(&format!("{name}.mean")).unwrap().data();
        let rv = w.buffer(&format!("{name}.var")).unwrap().data();
        for i in 0..mean.len() {
            assert!((mean[i] - rm[i]).abs() < 1e-3 && (var[i] - rv[i]).abs() < 1e-3, "{name}");
        }
    }
}

#[test]
fn shared_weights_checkpoint_round_trips() {
    let s = conv_space();
    let w = shared(&s, 24);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.ckpt");
    w.save(&p).unwrap();
    assert_eq!(SharedWeights::load(&p).unwrap(), w);
}

#[test]
fn mismatched_config_is_rejected() {
    let s = conv_space();
    let w = shared(&s, 25);
    let mut c = s.max_config();
    c.stages[1].layers[0].width = 0.3;
    assert!(extract_subnet(&w, &c, BnMode::Running).is_err());
    assert!(count_flops(&s, &c, s.input).is_err());
    c.stages.pop();
    assert!(extract_subnet(&w, &c, BnMode::Running).is_err());
}
