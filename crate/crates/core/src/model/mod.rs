//! The HSViT model: per-group convolutional branches, per-group attention
//! stacks with their own CLS tokens, and a mean-pooled linear head.

mod config;
mod hsvit;

pub use config::{ConvLayout, ModelConfig, ShapeLadder, Variant};
pub use hsvit::{
    aggregate_predict, group_forward, partition_groups, AttentionGroup, ForwardPass, GroupBranch, HsvitModel,
};

pub(crate) use hsvit::{aggregate_graph, check_image, group_summary, group_tokens, prepare_image};
