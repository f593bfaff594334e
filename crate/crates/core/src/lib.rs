//! Variational Bayesian MLP with confidence-gated prediction, plus a
//! split-MNIST continual-learning harness.
//!
//! - [`mnist_io`]: IDX parsing and the five digit-pair tasks
//! - [`vicore`]: Gaussian posteriors, KL/ELBO, pathwise gradients, Adam
//! - [`model`]: the 784-400-10 MLP, with or without learnable thresholds
//! - [`inference`]: Monte-Carlo predictive, abstention, noise probe
//! - [`continual`]: training loop and the sequential task protocol
//! - [`report`] and [`cli`]: report rendering and the `bnn` driver

pub mod checkpoint;
pub mod cli;
pub mod continual;
pub mod gradcheck;
pub mod inference;
mod linalg;
pub mod mnist_io;
pub mod model;
pub mod report;
pub mod vicore;

pub use continual::{run_continual, EvalConfig, EvalMatrix, StageRow, TrainConfig, Trainer};
pub use inference::{
    decide, evaluate, noise_probe, predictive, Decision, EvalRecord, Mode, PredictiveDistribution,
};
pub use mnist_io::{split_tasks, ImageSet, TaskSplit};
pub use model::{forward, init_model, BayesMlp, ModelConfig, Variant};
pub use vicore::{NoiseDraw, PriorSpec, VariationalParam};
