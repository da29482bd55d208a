//! Network assembly: the LR and HR branches, their fusion into one stage,
//! multi-stage stacking and the ablation variants.

mod branch;
mod network;

pub use branch::{
    shared_feature_channels, BoundBranch, BranchKind, BranchParams, ConvParams, ConvSpec, LayerSpec, LrVars,
    HR_REFERENCE, LR_REFERENCE,
};
pub use network::{LayerCount, NetConfig, Network, Stage, StageBinding, StageOutputs, StageVars, Variant};
