//! The toy language model, its optimizer and training loop.

pub mod checkpoint;
mod corpus;
mod model;
mod optim;
mod train;

pub use corpus::{Corpus, Example, TokenId};
pub use model::{
    argmax, evaluate, forward, grad_global_norm, init_model, loss_and_grads, BatchResult, EvalMetrics, ModelConfig,
    ToyModelParams, TENSOR_NAMES,
};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use train::{probe_records, train, CaptureSource, TrainLog, TrainLogEntry, TrainOutput, TrainRun};
