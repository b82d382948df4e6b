//! Cross-architecture siamese pretraining on a single augmented view.
//!
//! A convolutional arm and a transformer arm see the same augmented image
//! and are pulled toward each other with a cosine loss on their outputs.
//! Both arms update by backprop; there is no teacher copy, no second view,
//! and no momentum encoder. The crate also ships the fine-tuning protocol,
//! a two-view teacher/student baseline for cost and stability comparisons,
//! dataset plumbing, metrics, and the analysis tooling (attention maps,
//! feature taps, robustness summaries) used to inspect trained arms.
//!
//! Module map:
//! - [`tensor`], [`nn`]: dense f64 tensors, layers, and their gradients.
//! - [`loss`]: normalized cosine pairing loss and its analytic gradient.
//! - [`arms`]: the model registry (CNN and ViT variants) and checkpoints.
//! - [`augment`], [`data`]: the augmentation pipeline and dataset handling.
//! - [`pretrain`], [`dino`]: the siamese trainer and the two-view baseline.
//! - [`finetune`]: focal-loss fine-tuning with early stopping.
//! - [`metrics`], [`analysis`]: evaluation metrics and inspection tools.
//! - [`optim`]: Adam, SGD, cosine schedule, and weight averaging.
//! - [`experiment`]: config-driven runs, sweeps, and report generation.

pub mod analysis;
pub mod arms;
pub mod augment;
pub mod data;
pub mod dino;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod pretrain;
pub mod record;
pub mod tensor;

pub use error::{CassError, Result};
