//! Self-supervised rotation-prediction pretraining and CNN→LSTM image
//! captioning, built on a small hand-differentiated layer stack.
//!
//! The pipeline:
//!
//! 1. [`rotation`] pretrains an [`models::Encoder`] by predicting which of four
//!    right-angle rotations was applied to an unlabeled image.
//! 2. [`models::probe`] measures the frozen representation with a
//!    multinomial logistic-regression probe.
//! 3. [`training::captioner`] fine-tunes encoder and [`models::Decoder`]
//!    end to end on caption data sampled by [`data`].
//! 4. [`evaluation`] reports loss, perplexity and BLEU side by side.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod rotation;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
