//! Skeleton-based hand gesture recognition with a knowledge-sharing
//! ensemble: a transformer and an ordered-neuron LSTM trained jointly with
//! a fusion classifier through online distillation, snapshot-ensembled over
//! cosine warm-restart cycles and evaluated leave-one-subject-out.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod onlstm;
pub mod ops;
pub mod optim;
pub mod report;
pub mod snapshot;
pub mod synth;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
