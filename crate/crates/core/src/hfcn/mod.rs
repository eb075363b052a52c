//! Hierarchical fully convolutional partition predictor.
//!
//! A trunk of 3x3 convolutions with pooling after every second layer feeds
//! four branches, one per merge-matrix level. Each branch downsamples with
//! a 4x4 stride-4 convolution, appends a constant QP plane and classifies
//! every position into the four merge codes. Everything runs in `f64`.

pub mod arch;
mod direct;
pub mod fast;
pub mod io;
pub mod layers;
pub mod model;
pub mod params;
pub mod train;

use thiserror::Error;

pub use arch::{flop_count, param_count, ArchSpec};
pub use fast::{CompiledModel, Workspace};
pub use io::{load_weights, load_weights_for, save_weights};
pub use model::{
    backward, forward, forward_batch, loss, loss_and_gradients, predict_tree, predict_trees,
    ForwardCache, Mode, Prediction, PROB_FLOOR,
};
pub use params::{init_params, Gradients, ModelParams};
pub use train::{evaluate_loss, train, train_with, LossHistory, LossRow, StepInfo, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum HfcnError {
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("corrupt weight file: {0}")]
    CorruptFile(String),
    #[error("weights were built for {found}, expected {expected}")]
    ArchMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
