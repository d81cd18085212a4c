//! The dynamic network: search space, shared weights, subnet extraction,
//! encodings and compute accounting.

pub mod encode;
pub mod flops;
pub mod plan;
pub mod space;
pub mod subnet;
pub mod weights;

pub use encode::{decode_config, encode_config, feature_len, from_genotype, gene_sizes, to_genotype};
pub use flops::{count_flops, FlopsReport, LayerCost};
pub use plan::{plan, BlockPlan, NetPlan};
pub use space::{
    all_dims, scaled_channels, ArchConfig, Dim, DimSet, LayerChoice, SearchSpace, StageConfig, StageSpec, StemSpec,
};
pub use subnet::{extract_subnet, recalibrate_bn, BnMode, BnStats, StaticBn, StaticNet, SubnetView};
pub use weights::{SharedWeights, BN_EPS, BN_MOMENTUM};
