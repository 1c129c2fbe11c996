//! Interpretability outputs: aggregated attention maps and local
//! surrogate (LIME) explanations.

mod attention;
mod lime;

pub use attention::{
    attention_diff, attention_map, Aggregation, AttentionDiff, AttentionFilter, AttentionMap,
};
pub use lime::{lime_explain, lime_explain_fn, Explanation, FeatureWeight, LimeConfig, ScoreFn};

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("no instances match the requested filter")]
    EmptyFilterSelection,
    #[error("dataset has no labels")]
    UnlabeledDataset,
    #[error("attention maps have different shapes or feature orders")]
    ShapeMismatch,
    #[error("all perturbed neighbors are identical")]
    DegeneratePerturbations,
    #[error("invalid explain config: {reason}")]
    InvalidConfig { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}
