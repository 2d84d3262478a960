//! The residual regression network: kernels, layers, loss, training and
//! model files.

pub mod io;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use io::{load_model, save_model};
pub use loss::{nrmse_grad, nrmse_loss, LossValue};
pub use model::{Model, ModelSpec, Network, StageSpec, TrainingMeta};
pub use tensor::Tensor;
pub use train::{train, train_with_progress, EpochReport, Optimizer, TrainConfig};
