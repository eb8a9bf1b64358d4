//! Training with in-batch memory accumulation and reset cycles, batched
//! demonstration preloading for inference, and the prefix-concatenation
//! baseline.

mod infer;
mod prepare;
mod rerank;
mod train;

pub use infer::{
    evaluate_items, infer, infer_prefix, preload_demos, query_seed, select_demos, DemoOrder, EvalOutput, Inference,
    InferenceConfig, RetrievalMode,
};
pub use prepare::{build_vocab, encode_input, Item, KnowledgeBase, Prepared};
pub use rerank::shuffle_rerank;
pub use train::{train, total_updates, LogRow, TraceRow, TrainConfig, TrainReport};

use thiserror::Error;

use crate::cmr::MemoryError;
use crate::data::DataError;
use crate::model::ModelError;
use crate::retrieval::RetrievalError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("loss became non-finite ({loss}) at batch {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no training instances")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<crate::tensor::TensorError> for PipelineError {
    fn from(e: crate::tensor::TensorError) -> Self {
        PipelineError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
