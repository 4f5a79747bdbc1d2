//! Two-branch network: a uniform 3D residual branch and a chain of
//! aggregation modules, fused stage by stage.

mod config;
mod model;

pub use config::{BlockKind, FusionKind, HeadInput, NetworkConfig, NetworkPlan, NutaPlan, StagePlan};
pub use model::{
    fuse, init_nuta_feature, residual_stage, ConvBn, ForwardOutput, Fusion, NutaStage, ResidualBlock, ResidualStage,
    StageTrace, TwoBranchNet,
};
