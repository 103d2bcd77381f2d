//! Next-sample predictors: the ARMA baseline and the leader/follower
//! fully connected networks with their training primitives.

mod arma;
mod checkpoint;
mod mlp;
mod model;
mod sgd;

use thiserror::Error;

pub use arma::{arma_predict, fit_arma, ArmaForecaster, ArmaParams};
pub use checkpoint::{
    read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to, Checkpoint,
};
pub use mlp::{
    mlp_backward, mlp_backward_accumulate, mlp_forward, mlp_init, Activation, DropoutMask,
    ForwardCache, Gradients, Layer, MlpParams,
};
pub use model::{
    predict_next, NetworkConfig, Normalizer, Predictor, TargetMode, WindowDataset, DEFAULT_WINDOW,
    FOLLOWER_DEPTH, HIDDEN_WIDTH, LEADER_DEPTH,
};
pub use sgd::{mse_gradient, mse_loss, sgd_step, MomentumState, SgdConfig};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("need {needed} past values, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("invalid network dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input has {got} values, network expects {expected}")]
    InputDims { expected: usize, got: usize },
    #[error("non-finite network input")]
    NonFiniteInput,
    #[error("non-finite network parameter")]
    NonFiniteParameter,
    #[error("forward cache was produced by a different network")]
    CacheMismatch,
    #[error("parameter shapes do not match")]
    ShapeMismatch,
    #[error("window has {got} samples, predictor expects {expected}")]
    WrongWindowLength { expected: usize, got: usize },
    #[error("least-squares fit is singular")]
    SingularFit,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
