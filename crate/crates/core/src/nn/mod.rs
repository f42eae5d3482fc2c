//! Small multilayer perceptrons: inference, backpropagation, plain and
//! differentially private training, and the binary model format.

pub mod dp;
pub mod format;
mod grad;
pub mod loss;
mod model;
pub mod train;

pub use dp::{dp_train, DpConfig, DpTrainOutcome};
pub use format::{deserialize, load_model, save_model, serialize};
pub use grad::{batch_gradient, mean_loss, per_example_gradients, Gradients};
pub use loss::{ce_loss, softmax, LossSpec};
pub use model::{Activation, MlpModel};
pub use train::{accuracy, train, train_with_eval, Distillation, EpochStats, History, Optimizer, TrainConfig};

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
