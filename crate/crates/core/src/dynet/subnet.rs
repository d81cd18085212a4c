//! Executable subnets: slicing views over the shared store and materialized copies.

use std::collections::BTreeMap;
use std::ops::Range;

use super::plan::{plan, BlockPlan, NetPlan};
use super::space::ArchConfig;
use super::weights::{SharedWeights, BN_EPS};
use crate::array::Array;
use crate::autodiff::{Model, Moments, Tape, Var};
use crate::error::{Error, Result};

/// Per-layer normalization statistics for one subnet, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStats {
    pub layers: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl BnStats {
    pub fn get(&self, name: &str) -> Result<(&[f64], &[f64])> {
        self.layers
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
            .ok_or_else(|| Error::Invalid(format!("no statistics for {name:?}")))
    }
}

/// Which statistics normalization layers use.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Current-batch statistics; moments are recorded on the tape.
    Batch,
    /// Leading channels of the shared running statistics.
    Running,
    /// Statistics recalibrated for this subnet.
    Fixed(&'a BnStats),
}

/// A configuration of the dynamic network reading its weights straight
/// from the shared store. Gradients come back under the shared names with
/// full shapes, zero outside the slices.
pub struct SubnetView<'a> {
    shared: &'a SharedWeights,
    plan: NetPlan,
    mode: BnMode<'a>,
}

fn full(n: usize) -> Range<usize> {
    0..n
}

/// Kernel window of size `k` centered in a `max`-sized kernel.
fn crop(k: usize, max: usize) -> Range<usize> {
    let off = (max - k) / 2;
    off..off + k
}

pub fn extract_subnet<'a>(shared: &'a SharedWeights, config: &ArchConfig, mode: BnMode<'a>) -> Result<SubnetView<'a>> {
    Ok(SubnetView { shared, plan: plan(shared.space(), config)?, mode })
}

impl<'a> SubnetView<'a> {
    pub fn plan(&self) -> &NetPlan {
        &self.plan
    }

    pub fn with_mode(mut self, mode: BnMode<'a>) -> Self {
        self.mode = mode;
        self
    }

    fn conv(&self, t: &mut Tape, name: &str, x: Var, ranges: [Range<usize>; 4], stride: usize) -> Result<Var> {
        let pad = ranges[2].len() / 2;
        let w = t.param_slice(name, self.shared.param(name)?, &ranges)?;
        t.conv2d(x, w, stride, pad)
    }

    fn norm(&self, t: &mut Tape, name: &str, x: Var, c: usize) -> Result<Var> {
        let g = t.param_slice(&format!("{name}.gamma"), self.shared.param(&format!("{name}.gamma"))?, &[full(c)])?;
        let b = t.param_slice(&format!("{name}.beta"), self.shared.param(&format!("{name}.beta"))?, &[full(c)])?;
        match self.mode {
            BnMode::Batch => {
                let shape = t.value(x).shape().to_vec();
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (y, mean, var) = t.batch_norm(x, g, b, BN_EPS)?;
                t.record_moments(Moments { name: name.to_string(), mean, var, count });
                Ok(y)
            }
            BnMode::Running => {
                let mean = &self.shared.buffer(&format!("{name}.mean"))?.data()[..c];
                let var = &self.shared.buffer(&format!("{name}.var"))?.data()[..c];
                t.batch_norm_fixed(x, g, b, mean, var, BN_EPS)
            }
            BnMode::Fixed(stats) => {
                let (mean, var) = stats.get(name)?;
                t.batch_norm_fixed(x, g, b, mean, var, BN_EPS)
            }
        }
    }

    fn block(&self, t: &mut Tape, b: &BlockPlan, x: Var) -> Result<Var> {
        let p = b.prefix();
        let one = || 0..1;
        let h = self.conv(t, &format!("{p}.conv1"), x, [full(b.mid), full(b.cin), one(), one()], 1)?;
        let h = self.norm(t, &format!("{p}.bn1"), h, b.mid)?;
        let h = t.relu(h)?;
        let k = crop(b.kernel, b.max_kernel);
        let h = self.conv(t, &format!("{p}.conv2"), h, [full(b.mid), full(b.mid), k.clone(), k], b.stride)?;
        let h = self.norm(t, &format!("{p}.bn2"), h, b.mid)?;
        let h = t.relu(h)?;
        let h = self.conv(t, &format!("{p}.conv3"), h, [full(b.cout), full(b.mid), one(), one()], 1)?;
        let h = self.norm(t, &format!("{p}.bn3"), h, b.cout)?;
        let y = if b.projection {
            let s = self.conv(t, &format!("{p}.proj"), x, [full(b.cout), full(b.cin), one(), one()], b.stride)?;
            let s = self.norm(t, &format!("{p}.bnp"), s, b.cout)?;
            t.add(h, s)?
        } else {
            t.channel_add(h, x)?
        };
        t.relu(y)
    }
}

impl Model for SubnetView<'_> {
    fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        check_input(t, x, self.plan.input)?;
        let pl = &self.plan;
        let k = full(pl.stem_kernel);
        let h = self.conv(t, "stem.conv", x, [full(pl.stem_channels), full(pl.input[0]), k.clone(), k], 1)?;
        let h = self.norm(t, "stem.bn", h, pl.stem_channels)?;
        let mut h = t.relu(h)?;
        for b in &pl.blocks {
            h = self.block(t, b, h)?;
        }
        let h = t.global_avg_pool(h)?;
        let w = t.param_slice("head.w", self.shared.param("head.w")?, &[full(pl.classes), full(pl.head_in)])?;
        let bias = t.param("head.b", self.shared.param("head.b")?)?;
        let z = t.linear(h, w)?;
        t.add_bias(z, bias)
    }
}

fn check_input(t: &Tape, x: Var, input: [usize; 3]) -> Result<()> {
    let s = t.value(x).shape();
    if s.len() != 4 || s[1..] != input {
        return Err(Error::Shape(format!("input {s:?}, network expects [B, {}, {}, {}]", input[0], input[1], input[2])));
    }
    Ok(())
}

/// Recomputes a subnet's normalization statistics from calibration batches.
///
/// Each layer's moments are pooled exactly over all batches, each layer
/// seeing inputs normalized with per-batch statistics upstream. The shared
/// store is left untouched.
pub fn recalibrate_bn(shared: &SharedWeights, config: &ArchConfig, batches: &[Array]) -> Result<BnStats> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    let view = extract_subnet(shared, config, BnMode::Batch)?;
    // per layer: Σn, Σn·mean, Σn·(var + mean²)
    let mut acc: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for batch in batches {
        let mut tape = Tape::without_param_grads();
        let x = tape.input(batch.clone(), false)?;
        view.forward(&mut tape, x)?;
        for m in tape.take_moments() {
            let e = acc.entry(m.name).or_insert_with(|| (0, vec![0.0; m.mean.len()], vec![0.0; m.mean.len()]));
            e.0 += m.count;
            let n = m.count as f64;
            for (i, (&mu, &v)) in m.mean.iter().zip(&m.var).enumerate() {
                e.1[i] += n * mu;
                e.2[i] += n * (v + mu * mu);
            }
        }
    }
    let layers = acc
        .into_iter()
        .map(|(name, (n, s1, s2))| {
            let n = n as f64;
            let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
            let var = s2.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0)).collect();
            (name, (mean, var))
        })
        .collect();
    Ok(BnStats { layers })
}

/// Normalization source for a [`StaticNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaticBn {
    Batch,
    Stored,
}

/// A standalone copy of one subnet: every array copied out of the shared
/// store at the subnet's exact shape.
#[derive(Clone, Debug)]
pub struct StaticNet {
    pub plan: NetPlan,
    pub params: BTreeMap<String, Array>,
    pub stats: BnStats,
    pub mode: StaticBn,
}

impl StaticNet {
    /// Copies the subnet's slices; statistics come from `stats` when given,
    /// otherwise from the shared running statistics.
    pub fn materialize(shared: &SharedWeights, config: &ArchConfig, stats: Option<&BnStats>) -> Result<Self> {
        let plan = plan(shared.space(), config)?;
        let mut params = BTreeMap::new();
        let mut layers = BTreeMap::new();
        let mut copy_bn = |name: &str, c: usize, params: &mut BTreeMap<String, Array>| -> Result<()> {
            for s in ["gamma", "beta"] {
                let n = format!("{name}.{s}");
                params.insert(n.clone(), shared.param(&n)?.slice(&[0..c])?);
            }
            let st = match stats {
                Some(st) => {
                    let (m, v) = st.get(name)?;
                    (m.to_vec(), v.to_vec())
                }
                None => (
                    shared.buffer(&format!("{name}.mean"))?.data()[..c].to_vec(),
                    shared.buffer(&format!("{name}.var"))?.data()[..c].to_vec(),
                ),
            };
            layers.insert(name.to_string(), st);
            Ok(())
        };
        params.insert("stem.conv".into(), shared.param("stem.conv")?.clone());
        copy_bn("stem.bn", plan.stem_channels, &mut params)?;
        for b in &plan.blocks {
            let p = b.prefix();
            let k = crop(b.kernel, b.max_kernel);
            let copies = [
                ("conv1", [0..b.mid, 0..b.cin, 0..1, 0..1]),
                ("conv2", [0..b.mid, 0..b.mid, k.clone(), k]),
                ("conv3", [0..b.cout, 0..b.mid, 0..1, 0..1]),
            ];
            for (n, r) in copies {
                params.insert(format!("{p}.{n}"), shared.param(&format!("{p}.{n}"))?.slice(&r)?);
            }
            copy_bn(&format!("{p}.bn1"), b.mid, &mut params)?;
            copy_bn(&format!("{p}.bn2"), b.mid, &mut params)?;
            copy_bn(&format!("{p}.bn3"), b.cout, &mut params)?;
            if b.projection {
                let r = [0..b.cout, 0..b.cin, 0..1, 0..1];
                params.insert(format!("{p}.proj"), shared.param(&format!("{p}.proj"))?.slice(&r)?);
                copy_bn(&format!("{p}.bnp"), b.cout, &mut params)?;
            }
        }
        params.insert("head.w".into(), shared.param("head.w")?.slice(&[0..plan.classes, 0..plan.head_in])?);
        params.insert("head.b".into(), shared.param("head.b")?.clone());
        Ok(Self { plan, params, stats: BnStats { layers }, mode: StaticBn::Stored })
    }

    pub fn with_mode(mut self, mode: StaticBn) -> Self {
        self.mode = mode;
        self
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    fn p(&self, t: &mut Tape, name: &str) -> Result<Var> {
        let a = self.params.get(name).ok_or_else(|| Error::Invalid(format!("no parameter {name:?}")))?;
        t.param(name, a)
    }

    fn conv_bn(&self, t: &mut Tape, x: Var, conv: &str, bn: &str, stride: usize) -> Result<Var> {
        let w = self.p(t, conv)?;
        let pad = t.value(w).shape()[2] / 2;
        let h = t.conv2d(x, w, stride, pad)?;
        let g = self.p(t, &format!("{bn}.gamma"))?;
        let b = self.p(t, &format!("{bn}.beta"))?;
        match self.mode {
            StaticBn::Batch => Ok(t.batch_norm(h, g, b, BN_EPS)?.0),
            StaticBn::Stored => {
                let (m, v) = self.stats.get(bn)?;
                t.batch_norm_fixed(h, g, b, m, v, BN_EPS)
            }
        }
    }
}

impl Model for StaticNet {
    fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        check_input(t, x, self.plan.input)?;
        let h = self.conv_bn(t, x, "stem.conv", "stem.bn", 1)?;
        let mut h = t.relu(h)?;
        for b in &self.plan.blocks {
            let p = b.prefix();
            let y = self.conv_bn(t, h, &format!("{p}.conv1"), &format!("{p}.bn1"), 1)?;
            let y = t.relu(y)?;
            let y = self.conv_bn(t, y, &format!("{p}.conv2"), &format!("{p}.bn2"), b.stride)?;
            let y = t.relu(y)?;
            let y = self.conv_bn(t, y, &format!("{p}.conv3"), &format!("{p}.bn3"), 1)?;
            let y = if b.projection {
                let s = self.conv_bn(t, h, &format!("{p}.proj"), &format!("{p}.bnp"), b.stride)?;
                t.add(y, s)?
            } else {
                t.channel_add(y, h)?
            };
            h = t.relu(y)?;
        }
        let h = t.global_avg_pool(h)?;
        let w = self.p(t, "head.w")?;
        let bias = self.p(t, "head.b")?;
        let z = t.linear(h, w)?;
        t.add_bias(z, bias)
    }
}
