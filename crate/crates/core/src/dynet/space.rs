//! Search spaces and architecture configurations.

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An elastic architecture dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dim {
    Width,
    Depth,
    Expansion,
    Kernel,
}

impl Dim {
    pub const ALL: [Dim; 4] = [Dim::Width, Dim::Depth, Dim::Expansion, Dim::Kernel];

    pub fn name(self) -> &'static str {
        match self {
            Dim::Width => "width",
            Dim::Depth => "depth",
            Dim::Expansion => "expansion",
            Dim::Kernel => "kernel",
        }
    }
}

impl std::str::FromStr for Dim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dim::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown dimension {s:?}")))
    }
}

/// A set of dimensions left free when sampling.
pub type DimSet = BTreeSet<Dim>;

pub fn all_dims() -> DimSet {
    Dim::ALL.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

/// One stage: a run of residual bottleneck blocks at a common resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Block output channels at width multiplier 1.
    pub channels: usize,
    /// Stride of the stage's first block.
    #[serde(default = "one")]
    pub stride: usize,
    pub max_depth: usize,
    pub depth_choices: Vec<usize>,
    pub width_choices: Vec<f64>,
    pub expansion_choices: Vec<f64>,
    /// Elastic middle-conv kernel sizes; `None` fixes the kernel at `kernel`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_choices: Option<Vec<usize>>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn one() -> usize {
    1
}

impl StageSpec {
    /// Kernel sizes a layer may take (a single entry when not elastic).
    pub fn kernels(&self) -> Vec<usize> {
        self.kernel_choices.clone().unwrap_or_else(|| vec![self.kernel])
    }

    pub fn max_kernel(&self) -> usize {
        *self.kernels().last().expect("non-empty kernels")
    }

    pub fn max_width(&self) -> f64 {
        *self.width_choices.last().expect("validated")
    }

    pub fn max_expansion(&self) -> f64 {
        *self.expansion_choices.last().expect("validated")
    }

    /// Per-layer choice combinations: |W|·|E|·|K|.
    pub fn layer_options(&self) -> usize {
        self.width_choices.len() * self.expansion_choices.len() * self.kernels().len()
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("stage {idx}: {msg}")));
        if self.channels == 0 || self.stride == 0 || self.max_depth == 0 {
            return bad("channels, stride and max_depth must be positive".into());
        }
        if self.depth_choices.is_empty() || self.width_choices.is_empty() || self.expansion_choices.is_empty() {
            return bad("choice lists must be non-empty".into());
        }
        if !strictly_ascending(&self.depth_choices) || !strictly_ascending_f(&self.width_choices)
            || !strictly_ascending_f(&self.expansion_choices)
        {
            return bad("choice lists must be sorted ascending without duplicates".into());
        }
        if self.depth_choices[0] == 0 || *self.depth_choices.last().unwrap() != self.max_depth {
            return bad(format!("depth choices must lie in [1, {}] and include it", self.max_depth));
        }
        for &m in self.width_choices.iter().chain(&self.expansion_choices) {
            if !(m > 0.0 && m <= 1.0) {
                return bad(format!("multiplier {m} outside (0, 1]"));
            }
        }
        let ks = self.kernels();
        if ks.is_empty() || !strictly_ascending(&ks) || ks.iter().any(|k| k % 2 == 0) {
            return bad("kernel sizes must be odd, non-empty and ascending".into());
        }
        Ok(())
    }
}

fn strictly_ascending(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn strictly_ascending_f(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

/// Channels kept under multiplier `m` of `c` channels: `⌈m·c⌉`, at least 1.
pub fn scaled_channels(m: f64, c: usize) -> usize {
    // the epsilon absorbs products like 0.35 * 20 = 7.000000000000001
    ((m * c as f64 - 1e-9).ceil() as usize).max(1)
}

/// The family of student architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Invalid("search space needs at least one stage".into()));
        }
        if self.input.iter().any(|&d| d == 0) || self.classes < 2 || self.stem.channels == 0 {
            return Err(Error::Invalid("input extents, class count (≥2) and stem channels must be positive".into()));
        }
        if self.stem.kernel % 2 == 0 {
            return Err(Error::Invalid("stem kernel must be odd".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(())
    }

    /// Whether `dim` can vary in this space. Kernel is only present when some
    /// stage declares kernel choices.
    pub fn has_dim(&self, dim: Dim) -> bool {
        match dim {
            Dim::Kernel => self.stages.iter().any(|s| s.kernel_choices.is_some()),
            _ => true,
        }
    }

    /// A five-stage bottleneck-residual space: depths {2,3,4}, widths
    /// {0.65, 0.8, 1.0}, expansions {0.2, 0.25, 0.35}.
    pub fn resnet_like() -> Self {
        let stage = |channels, stride| StageSpec {
            channels,
            stride,
            max_depth: 4,
            depth_choices: vec![2, 3, 4],
            width_choices: vec![0.65, 0.8, 1.0],
            expansion_choices: vec![0.2, 0.25, 0.35],
            kernel_choices: None,
            kernel: 3,
        };
        SearchSpace {
            input: [3, 32, 32],
            classes: 10,
            stem: StemSpec { channels: 64, kernel: 3 },
            stages: vec![stage(64, 1), stage(128, 2), stage(256, 2), stage(512, 2), stage(1024, 2)],
        }
    }

    /// Five stages with elastic kernels {3, 5, 7} in place of width.
    pub fn mobilenet_like() -> Self {
        let stage = |channels, stride| StageSpec {
            channels,
            stride,
            max_depth: 4,
            depth_choices: vec![2, 3, 4],
            width_choices: vec![1.0],
            expansion_choices: vec![0.2, 0.25, 0.35],
            kernel_choices: Some(vec![3, 5, 7]),
            kernel: 7,
        };
        SearchSpace {
            input: [3, 32, 32],
            classes: 10,
            stem: StemSpec { channels: 16, kernel: 3 },
            stages: vec![stage(24, 1), stage(40, 2), stage(80, 2), stage(112, 1), stage(160, 2)],
        }
    }

    /// The largest configuration: max depth and maximal choices everywhere.
    pub fn max_config(&self) -> ArchConfig {
        ArchConfig {
            stages: self
                .stages
                .iter()
                .map(|s| StageConfig {
                    depth: s.max_depth,
                    layers: vec![
                        LayerChoice { width: s.max_width(), expansion: s.max_expansion(), kernel: s.max_kernel() };
                        s.max_depth
                    ],
                })
                .collect(),
        }
    }

    /// Exact number of distinct configurations:
    /// `Π_stage Σ_{d ∈ D} (|W|·|E|·|K|)^d`.
    pub fn cardinality(&self) -> BigUint {
        self.stages
            .iter()
            .map(|s| {
                let per_layer = BigUint::from(s.layer_options());
                s.depth_choices.iter().map(|&d| per_layer.pow(d as u32)).sum::<BigUint>()
            })
            .product()
    }

    /// Samples a configuration: dimensions outside `free` take their maximal
    /// value, free ones are drawn uniformly and independently per slot.
    pub fn sample_config(&self, free: &DimSet, rng: &mut impl Rng) -> ArchConfig {
        let pick_f = |v: &[f64], dim: Dim, rng: &mut dyn rand::RngCore| -> f64 {
            if free.contains(&dim) {
                v[rng.random_range(0..v.len())]
            } else {
                *v.last().unwrap()
            }
        };
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let depth = if free.contains(&Dim::Depth) {
                s.depth_choices[rng.random_range(0..s.depth_choices.len())]
            } else {
                s.max_depth
            };
            let ks = s.kernels();
            let layers = (0..depth)
                .map(|_| {
                    let width = pick_f(&s.width_choices, Dim::Width, rng);
                    let expansion = pick_f(&s.expansion_choices, Dim::Expansion, rng);
                    let kernel =
                        if free.contains(&Dim::Kernel) { ks[rng.random_range(0..ks.len())] } else { *ks.last().unwrap() };
                    LayerChoice { width, expansion, kernel }
                })
                .collect();
            stages.push(StageConfig { depth, layers });
        }
        ArchConfig { stages }
    }

    /// Every configuration of the space, in a fixed order. Refuses spaces
    /// larger than `limit`.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<ArchConfig>> {
        let card = self.cardinality();
        if card > BigUint::from(limit) {
            return Err(Error::Invalid(format!("space has {card} configurations, limit is {limit}")));
        }
        let per_stage: Vec<Vec<StageConfig>> = self.stages.iter().map(enumerate_stage).collect();
        let mut out = vec![ArchConfig { stages: Vec::new() }];
        for options in per_stage {
            let mut next = Vec::with_capacity(out.len() * options.len());
            for prefix in &out {
                for o in &options {
                    let mut c = prefix.clone();
                    c.stages.push(o.clone());
                    next.push(c);
                }
            }
            out = next;
        }
        Ok(out)
    }

    /// Checks that every choice of `config` is a member of this space.
    pub fn check_config(&self, config: &ArchConfig) -> Result<()> {
        if config.stages.len() != self.stages.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} stages, space has {}",
                config.stages.len(),
                self.stages.len()
            )));
        }
        for (i, (c, s)) in config.stages.iter().zip(&self.stages).enumerate() {
            if !s.depth_choices.contains(&c.depth) || c.layers.len() != c.depth {
                return Err(Error::ConfigMismatch(format!("stage {i}: depth {} with {} layers", c.depth, c.layers.len())));
            }
            let ks = s.kernels();
            for (j, l) in c.layers.iter().enumerate() {
                if !s.width_choices.contains(&l.width)
                    || !s.expansion_choices.contains(&l.expansion)
                    || !ks.contains(&l.kernel)
                {
                    return Err(Error::ConfigMismatch(format!("stage {i} layer {j}: {l:?}")));
                }
            }
        }
        Ok(())
    }
}

fn enumerate_stage(s: &StageSpec) -> Vec<StageConfig> {
    let mut layer_opts = Vec::new();
    for &w in &s.width_choices {
        for &e in &s.expansion_choices {
            for k in s.kernels() {
                layer_opts.push(LayerChoice { width: w, expansion: e, kernel: k });
            }
        }
    }
    let mut out = Vec::new();
    for &d in &s.depth_choices {
        let mut seqs: Vec<Vec<LayerChoice>> = vec![Vec::new()];
        for _ in 0..d {
            seqs = seqs
                .into_iter()
                .flat_map(|seq| {
                    layer_opts.iter().map(move |o| {
                        let mut s = seq.clone();
                        s.push(*o);
                        s
                    })
                })
                .collect();
        }
        out.extend(seqs.into_iter().map(|layers| StageConfig { depth: d, layers }));
    }
    out
}

/// Choices for one active layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub width: f64,
    pub expansion: f64,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    /// Exactly `depth` entries; skipped layers carry no choices.
    pub layers: Vec<LayerChoice>,
}

/// One student architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub stages: Vec<StageConfig>,
}

impl ArchConfig {
    /// Total number of active blocks.
    pub fn blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }
}

/// Compact comma-free text form, e.g. `d2:w1e0.5k3;w0.5e1k3|d1:w1e1k3`.
impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "d{}:", s.depth)?;
            for (j, l) in s.layers.iter().enumerate() {
                if j > 0 {
                    f.write_str(";")?;
                }
                write!(f, "w{}e{}k{}", l.width, l.expansion, l.kernel)?;
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for ArchConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed architecture string {s:?}"));
        let mut stages = Vec::new();
        for stage in s.split('|') {
            let (d, layers) = stage.strip_prefix('d').and_then(|r| r.split_once(':')).ok_or_else(bad)?;
            let depth: usize = d.parse().map_err(|_| bad())?;
            let mut parsed = Vec::new();
            for l in layers.split(';').filter(|l| !l.is_empty()) {
                let rest = l.strip_prefix('w').ok_or_else(bad)?;
                let (w, rest) = rest.split_once('e').ok_or_else(bad)?;
                let (e, k) = rest.split_once('k').ok_or_else(bad)?;
                parsed.push(LayerChoice {
                    width: w.parse().map_err(|_| bad())?,
                    expansion: e.parse().map_err(|_| bad())?,
                    kernel: k.parse().map_err(|_| bad())?,
                });
            }
            if parsed.len() != depth {
                return Err(bad());
            }
            stages.push(StageConfig { depth, layers: parsed });
        }
        Ok(ArchConfig { stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_space() -> SearchSpace {
        SearchSpace {
            input: [1, 1, 1],
            classes: 2,
            stem: StemSpec { channels: 2, kernel: 1 },
            stages: vec![
                StageSpec {
                    channels: 4,
                    stride: 1,
                    max_depth: 2,
                    depth_choices: vec![1, 2],
                    width_choices: vec![0.5, 1.0],
                    expansion_choices: vec![1.0],
                    kernel_choices: None,
                    kernel: 1,
                },
                StageSpec {
                    channels: 4,
                    stride: 1,
                    max_depth: 2,
                    depth_choices: vec![2],
                    width_choices: vec![0.5, 1.0],
                    expansion_choices: vec![0.5, 1.0],
                    kernel_choices: Some(vec![1, 3]),
                    kernel: 1,
                },
            ],
        }
    }

    #[test]
    fn resnet_like_cardinality_matches_closed_form() {
        let n = SearchSpace::resnet_like().cardinality();
        assert_eq!(n, BigUint::from(7371u32).pow(5));
        assert_eq!(n.to_string(), "21758655492572485851");
    }

    #[test]
    fn single_choice_space_has_one_config() {
        let mut s = toy_space();
        s.stages.truncate(1);
        s.stages[0].depth_choices = vec![2];
        s.stages[0].width_choices = vec![1.0];
        assert_eq!(s.cardinality(), BigUint::from(1u32));
        assert_eq!(s.enumerate(10).unwrap(), vec![s.max_config()]);
    }

    #[test]
    fn cardinality_matches_enumeration() {
        let s = toy_space();
        // stage 0: 2 + 2² = 6; stage 1: 8² = 64
        let all = s.enumerate(10_000).unwrap();
        assert_eq!(all.len(), 384);
        assert_eq!(s.cardinality(), BigUint::from(384u32));
        for c in &all {
            s.check_config(c).unwrap();
        }
    }

    #[test]
    fn max_config_of_resnet_like() {
        let c = SearchSpace::resnet_like().max_config();
        for st in &c.stages {
            assert_eq!(st.depth, 4);
            assert!(st.layers.iter().all(|l| l.width == 1.0 && l.expansion == 0.35));
        }
    }

    #[test]
    fn width_only_sampling_fixes_other_dims() {
        let s = toy_space();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let free: DimSet = [Dim::Width].into();
        for _ in 0..200 {
            let c = s.sample_config(&free, &mut rng);
            for (st, spec) in c.stages.iter().zip(&s.stages) {
                assert_eq!(st.depth, spec.max_depth);
                assert!(st.layers.iter().all(|l| l.expansion == spec.max_expansion() && l.kernel == spec.max_kernel()));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = toy_space();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| s.sample_config(&all_dims(), &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn text_form_round_trips() {
        let s = toy_space();
        for c in s.enumerate(10_000).unwrap().iter().step_by(37) {
            let parsed: ArchConfig = c.to_string().parse().unwrap();
            assert_eq!(&parsed, c);
            assert!(!c.to_string().contains(','));
        }
    }

    #[test]
    fn validation_rejects_bad_spaces() {
        let mut s = toy_space();
        s.stages[0].width_choices = vec![1.0, 0.5];
        assert!(s.validate().is_err());
        let mut s = toy_space();
        s.stages[0].depth_choices = vec![1];
        assert!(s.validate().is_err());
        let mut s = toy_space();
        s.stages[1].kernel_choices = Some(vec![2, 3]);
        assert!(s.validate().is_err());
        let mut s = toy_space();
        s.stages.clear();
        assert!(s.validate().is_err());
        assert!(toy_space().validate().is_ok());
    }

    #[test]
    fn scaled_channels_absorbs_rounding() {
        assert_eq!(scaled_channels(0.35, 20), 7);
        assert_eq!(scaled_channels(0.5, 4), 2);
        assert_eq!(scaled_channels(0.65, 4), 3);
        assert_eq!(scaled_channels(0.01, 4), 1);
    }
}
