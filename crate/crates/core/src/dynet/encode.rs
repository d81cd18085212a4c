//! Fixed-length encodings of architecture configurations.
//!
//! Two views of the same information:
//! - the one-hot *feature vector* consumed by the predictor, where skipped
//!   layers encode as all-zero blocks;
//! - the *genotype*, one choice index per slot, consumed by the search.
//!   Slots of skipped layers still carry a gene; it is ignored on decode.

use super::space::{ArchConfig, LayerChoice, SearchSpace, StageConfig};
use crate::error::{Error, Result};

/// Length of [`encode_config`]'s output:
/// `Σ_stage (|D| + max_depth·(|W| + |E| + [|K|]))`.
pub fn feature_len(space: &SearchSpace) -> usize {
    space
        .stages
        .iter()
        .map(|s| {
            let k = s.kernel_choices.as_ref().map_or(0, Vec::len);
            s.depth_choices.len() + s.max_depth * (s.width_choices.len() + s.expansion_choices.len() + k)
        })
        .sum()
}

fn index_of_f(v: &[f64], x: f64) -> Option<usize> {
    v.iter().position(|&c| c == x)
}

/// One-hot encodes a configuration of `space`.
pub fn encode_config(space: &SearchSpace, config: &ArchConfig) -> Result<Vec<f64>> {
    space.check_config(config)?;
    let mut out = vec![0.0; feature_len(space)];
    let mut base = 0;
    for (s, c) in space.stages.iter().zip(&config.stages) {
        let d = s.depth_choices.iter().position(|&d| d == c.depth).expect("checked");
        out[base + d] = 1.0;
        base += s.depth_choices.len();
        let (nw, ne) = (s.width_choices.len(), s.expansion_choices.len());
        let nk = s.kernel_choices.as_ref().map_or(0, Vec::len);
        for j in 0..s.max_depth {
            if let Some(l) = c.layers.get(j) {
                out[base + index_of_f(&s.width_choices, l.width).expect("checked")] = 1.0;
                out[base + nw + index_of_f(&s.expansion_choices, l.expansion).expect("checked")] = 1.0;
                if let Some(ks) = &s.kernel_choices {
                    out[base + nw + ne + ks.iter().position(|&k| k == l.kernel).expect("checked")] = 1.0;
                }
            }
            base += nw + ne + nk;
        }
    }
    Ok(out)
}

/// Inverse of [`encode_config`].
pub fn decode_config(space: &SearchSpace, features: &[f64]) -> Result<ArchConfig> {
    if features.len() != feature_len(space) {
        return Err(Error::Shape(format!("feature length {} != {}", features.len(), feature_len(space))));
    }
    let hot = |block: &[f64]| -> Result<usize> {
        let ones: Vec<usize> = block.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        match ones.as_slice() {
            [i] if block.iter().all(|&v| v == 0.0 || v == 1.0) => Ok(*i),
            _ => Err(Error::Format("feature block is not one-hot".into())),
        }
    };
    let mut stages = Vec::new();
    let mut base = 0;
    for s in &space.stages {
        let depth = s.depth_choices[hot(&features[base..base + s.depth_choices.len()])?];
        base += s.depth_choices.len();
        let (nw, ne) = (s.width_choices.len(), s.expansion_choices.len());
        let nk = s.kernel_choices.as_ref().map_or(0, Vec::len);
        let mut layers = Vec::new();
        for j in 0..s.max_depth {
            let block = &features[base..base + nw + ne + nk];
            if j < depth {
                let kernel = match &s.kernel_choices {
                    Some(ks) => ks[hot(&block[nw + ne..])?],
                    None => s.kernel,
                };
                layers.push(LayerChoice {
                    width: s.width_choices[hot(&block[..nw])?],
                    expansion: s.expansion_choices[hot(&block[nw..nw + ne])?],
                    kernel,
                });
            } else if block.iter().any(|&v| v != 0.0) {
                return Err(Error::Format(format!("skipped layer {j} has a non-zero block")));
            }
            base += nw + ne + nk;
        }
        stages.push(StageConfig { depth, layers });
    }
    let config = ArchConfig { stages };
    space.check_config(&config)?;
    Ok(config)
}

/// Number of alternatives of every genotype slot.
pub fn gene_sizes(space: &SearchSpace) -> Vec<usize> {
    let mut out = Vec::new();
    for s in &space.stages {
        out.push(s.depth_choices.len());
        for _ in 0..s.max_depth {
            out.push(s.width_choices.len());
            out.push(s.expansion_choices.len());
            if let Some(ks) = &s.kernel_choices {
                out.push(ks.len());
            }
        }
    }
    out
}

/// Choice-index genotype of `config`; skipped layers get their maximal index.
pub fn to_genotype(space: &SearchSpace, config: &ArchConfig) -> Result<Vec<usize>> {
    space.check_config(config)?;
    let mut g = Vec::new();
    for (s, c) in space.stages.iter().zip(&config.stages) {
        g.push(s.depth_choices.iter().position(|&d| d == c.depth).expect("checked"));
        for j in 0..s.max_depth {
            match c.layers.get(j) {
                Some(l) => {
                    g.push(index_of_f(&s.width_choices, l.width).expect("checked"));
                    g.push(index_of_f(&s.expansion_choices, l.expansion).expect("checked"));
                    if let Some(ks) = &s.kernel_choices {
                        g.push(ks.iter().position(|&k| k == l.kernel).expect("checked"));
                    }
                }
                None => {
                    g.push(s.width_choices.len() - 1);
                    g.push(s.expansion_choices.len() - 1);
                    if let Some(ks) = &s.kernel_choices {
                        g.push(ks.len() - 1);
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Decodes a genotype, ignoring genes of skipped layers.
pub fn from_genotype(space: &SearchSpace, genes: &[usize]) -> Result<ArchConfig> {
    let sizes = gene_sizes(space);
    if genes.len() != sizes.len() || genes.iter().zip(&sizes).any(|(g, s)| g >= s) {
        return Err(Error::ConfigMismatch(format!("genotype {genes:?} does not fit the space")));
    }
    let mut it = genes.iter().copied();
    let mut stages = Vec::new();
    for s in &space.stages {
        let depth = s.depth_choices[it.next().unwrap()];
        let mut layers = Vec::new();
        for j in 0..s.max_depth {
            let w = s.width_choices[it.next().unwrap()];
            let e = s.expansion_choices[it.next().unwrap()];
            let k = match &s.kernel_choices {
                Some(ks) => ks[it.next().unwrap()],
                None => s.kernel,
            };
            if j < depth {
                layers.push(LayerChoice { width: w, expansion: e, kernel: k });
            }
        }
        stages.push(StageConfig { depth, layers });
    }
    Ok(ArchConfig { stages })
}
