//! Desk-scale self-supervised learning engine built around momentum (EMA)
//! teacher/student training with an additional intra-view residual loss that
//! closes the representation gap between the two networks.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense tensors with reverse-mode autodiff and the
//!   finite-difference gradient oracle,
//! - [`nn`]: layers, backbones and projector/predictor heads,
//! - [`momentum`]: the EMA teacher lifecycle and its cosine schedule,
//! - [`objectives`]: InfoNCE, cosine/CE/MSE intra distances and their
//!   symmetrized combinations,
//! - [`data`]: CIFAR binaries, synthetic blobs, two-view augmentation and
//!   deterministic batching,
//! - [`train`]: LARS/SGD, warmup-cosine schedule and the pretraining loop,
//! - [`eval`]: frozen-feature linear probe and KNN-1,
//! - [`store`]: run manifests, checkpoints, metrics JSONL and config files,
//! - [`gradcheck`]: the op-suite gradient check driven by the CLI.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod momentum;
pub mod nn;
pub mod objectives;
pub mod store;
pub mod tensor;
pub mod train;
pub mod util;
