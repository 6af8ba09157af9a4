//! LSTM binary detector written from scratch: forward pass, BPTT with
//! parameter and input gradients, optimizers and training loop.

mod checkpoint;
mod loss;
mod lstm;
mod optim;
mod params;
mod train;

use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use loss::{bce_grad_logit, bce_loss, sigmoid, LossValue, PROB_CLAMP};
pub use lstm::{backward, backward_batch, backward_from_logit_grads, forward, forward_batch, ForwardCache, Gradients};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{init_model, parameter_count, DetectorModel, LstmParams, ModelConfig, GATE_ORDER};
pub use train::{
    classify, evaluate, fit, fit_with_state, predict, predict_labels, predict_proba, predict_proba_arrays,
    train_epoch, write_history_csv, EpochStats, FitOutcome, TrainConfig,
};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
