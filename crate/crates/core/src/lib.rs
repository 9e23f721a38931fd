//! Training primitives for feedforward acoustic-model style networks:
//! dense matrices, seeded sampling, dropout/maxout/convolution layers with
//! exact gradients, RBM and denoising-autoencoder pre-training, and SGD
//! fine-tuning driven by a validation-based learning-rate schedule.
//!
//! The crate is `no_std` + `alloc`; everything that touches files, clocks,
//! or threads lives in the companion `pdnn` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod activation;
pub mod data;
pub mod error;
pub mod finetune;
pub mod matrix;
pub mod network;
pub mod pretrain;
pub mod rng;

pub use activation::{apply_activation, ActivationKind};
pub use error::{Error, Result};
pub use matrix::{sample_bernoulli, sample_gaussian, Matrix};
pub use rng::SeededRng;
