//! The shared parameter store sized for the maximal configuration.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::plan::block_prefix;
use super::space::{scaled_channels, SearchSpace};
use crate::archive::Archive;
use crate::array::Array;
use crate::autodiff::Moments;
use crate::error::{Error, Result};

/// Normalization epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

const ARCHIVE_KIND: &str = "shared-weights";

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    HeNormal { fan_in: usize },
    Ones,
    Zeros,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv(name: String, cout: usize, cin: usize, k: usize) -> ParamSpec {
    ParamSpec { name, shape: vec![cout, cin, k, k], init: Init::HeNormal { fan_in: cin * k * k } }
}

fn norm(prefix: &str, c: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec { name: format!("{prefix}.gamma"), shape: vec![c], init: Init::Ones });
    out.push(ParamSpec { name: format!("{prefix}.beta"), shape: vec![c], init: Init::Zeros });
}

/// Every trainable array of the maximal network, in a fixed order.
fn layout(space: &SearchSpace) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    out.push(conv("stem.conv".into(), space.stem.channels, space.input[0], space.stem.kernel));
    norm("stem.bn", space.stem.channels, &mut out);
    let mut cin = space.stem.channels;
    for (si, s) in space.stages.iter().enumerate() {
        let cout = scaled_channels(s.max_width(), s.channels);
        let mid = scaled_channels(s.max_expansion(), s.channels);
        let k = s.max_kernel();
        for bi in 0..s.max_depth {
            let p = block_prefix(si, bi);
            out.push(conv(format!("{p}.conv1"), mid, cin, 1));
            norm(&format!("{p}.bn1"), mid, &mut out);
            out.push(conv(format!("{p}.conv2"), mid, mid, k));
            norm(&format!("{p}.bn2"), mid, &mut out);
            out.push(conv(format!("{p}.conv3"), cout, mid, 1));
            norm(&format!("{p}.bn3"), cout, &mut out);
            if bi == 0 {
                out.push(conv(format!("{p}.proj"), cout, cin, 1));
                norm(&format!("{p}.bnp"), cout, &mut out);
            }
            cin = cout;
        }
    }
    out.push(ParamSpec {
        name: "head.w".into(),
        shape: vec![space.classes, cin],
        init: Init::HeNormal { fan_in: cin },
    });
    out.push(ParamSpec { name: "head.b".into(), shape: vec![space.classes], init: Init::Zeros });
    out
}

/// Parameter store of the dynamic network. Every subnet reads slices of it.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedWeights {
    space: SearchSpace,
    params: BTreeMap<String, Array>,
    /// Normalization running statistics: `<bn>.mean` and `<bn>.var`.
    buffers: BTreeMap<String, Array>,
}

impl SharedWeights {
    /// He-normal convolutions, unit gains, zero shifts and biases.
    pub fn init(space: &SearchSpace, rng: &mut impl Rng) -> Result<Self> {
        space.validate()?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for spec in layout(space) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::HeNormal { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    (0..n).map(|_| normal.sample(rng)).collect()
                }
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            if let Some(bn) = spec.name.strip_suffix(".gamma") {
                buffers.insert(format!("{bn}.mean"), Array::zeros(&spec.shape));
                buffers.insert(format!("{bn}.var"), Array::full(&spec.shape, 1.0));
            }
            params.insert(spec.name, Array::new(spec.shape, data)?);
        }
        Ok(Self { space: space.clone(), params, buffers })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn param(&self, name: &str) -> Result<&Array> {
        self.params.get(name).ok_or_else(|| Error::Invalid(format!("no parameter {name:?}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Array> {
        &self.params
    }

    pub fn buffer(&self, name: &str) -> Result<&Array> {
        self.buffers.get(name).ok_or_else(|| Error::Invalid(format!("no buffer {name:?}")))
    }

    pub fn buffers(&self) -> &BTreeMap<String, Array> {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Folds observed batch moments into the running statistics of the
    /// leading channels they cover.
    pub fn update_running_stats(&mut self, moments: &[Moments], momentum: f64) -> Result<()> {
        for m in moments {
            for (suffix, values) in [("mean", &m.mean), ("var", &m.var)] {
                let buf = self
                    .buffers
                    .get_mut(&format!("{}.{suffix}", m.name))
                    .ok_or_else(|| Error::Invalid(format!("no statistics for {:?}", m.name)))?;
                if values.len() > buf.len() {
                    return Err(Error::Shape(format!("{} channels of statistics for {}", values.len(), buf.len())));
                }
                for (r, &v) in buf.data_mut().iter_mut().zip(values) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        self.to_archive_prefixed("", Archive::new(ARCHIVE_KIND, serde_json::json!({ "space": self.space })))
    }

    /// Appends this store's arrays under `prefix` to an existing archive.
    pub fn to_archive_prefixed(&self, prefix: &str, mut archive: Archive) -> Archive {
        for (n, a) in &self.params {
            archive.push(format!("{prefix}param/{n}"), a.clone());
        }
        for (n, a) in &self.buffers {
            archive.push(format!("{prefix}buffer/{n}"), a.clone());
        }
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        archive.expect_kind(ARCHIVE_KIND)?;
        let space: SearchSpace = serde_json::from_value(archive.meta["space"].clone())
            .map_err(|e| Error::Format(format!("space descriptor: {e}")))?;
        Self::from_archive_prefixed(&space, "", archive)
    }

    /// Rebuilds a store for `space` from arrays stored under `prefix`,
    /// checking every array against the maximal layout.
    pub fn from_archive_prefixed(space: &SearchSpace, prefix: &str, archive: &Archive) -> Result<Self> {
        space.validate()?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for spec in layout(space) {
            let get = |name: String| -> Result<Array> {
                archive.get(&name).cloned().ok_or_else(|| Error::Format(format!("missing array {name:?}")))
            };
            let a = get(format!("{prefix}param/{}", spec.name))?;
            if a.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!("{}: shape {:?}, expected {:?}", spec.name, a.shape(), spec.shape)));
            }
            if let Some(bn) = spec.name.strip_suffix(".gamma") {
                for s in ["mean", "var"] {
                    let b = get(format!("{prefix}buffer/{bn}.{s}"))?;
                    if b.shape() != spec.shape.as_slice() {
                        return Err(Error::Format(format!("{bn}.{s}: bad shape")));
                    }
                    buffers.insert(format!("{bn}.{s}"), b);
                }
            }
            params.insert(spec.name, a);
        }
        Ok(Self { space: space.clone(), params, buffers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
