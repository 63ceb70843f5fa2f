//! The recommender: configuration, parameters, and the forward pass.

mod config;
pub(crate) mod forward;
mod params;
mod space;

pub use config::{Ablation, Inner, ModelConfig, Variant};
pub use forward::{
    batch_forward, forward, item_representation_values, item_representations, score_batch,
    sequence_forward, BatchForward, BatchPlan, ForwardOutput, GlobalIndex, ParamVars,
};
pub use params::{Layout, ModelParams, BLOB_FILE, MANIFEST_FILE};
pub use space::Space;

#[cfg(test)]
mod tests;
