//! Lexical transfer of small transformer encoders into new languages.
//!
//! The pipeline induces a subword vocabulary for the target language
//! ([`tokenizer`]), trains context-independent token embeddings over it
//! ([`word2vec`]), grafts them onto an encoder pre-trained on a source
//! language ([`model`], [`transfer`]) and fine-tunes a sentiment classifier
//! with selected parameter groups frozen. [`harness`] generates synthetic
//! language pairs and runs the ablation grids.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod transfer;
pub mod word2vec;

pub use error::{Error, Result};
pub use tensor::Tensor;
