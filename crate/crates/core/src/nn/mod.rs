//! Layers with hand-written backward passes, Adam with cosine annealing, and
//! a mini-batch training loop with early stopping.

mod layers;
mod optim;
mod train;

pub use layers::{Dropout, Layer, LayerNorm, Linear, Mode, Param, Relu, Residual, Stack, LAYERNORM_EPS};
pub use optim::{Adam, AdamConfig};
pub use train::{fit, EarlyStopping, FitReport, TrainLoopConfig};

#[cfg(test)]
mod tests;
