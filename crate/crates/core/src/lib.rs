//! Attention-erasing deep hashing for fine-grained image retrieval.
//!
//! A small convolutional encoder and a `tanh` hash layer produce relaxed
//! codes for query images, while database codes are free binary variables
//! learned by closed-form column sweeps. Training pairs every sampled anchor
//! with a same-class partner and with an erased copy of itself, where the
//! erased regions are the hottest cells of the network's own channel-mean
//! attention. Retrieval is an exact Hamming scan, scored by MAP.
//!
//! Module map:
//!
//! - [`tensor`], [`ops`], [`optim`]: numeric core with manual backward passes
//! - [`dataset`]: synthetic fine-grained data, similarity supervision, sampling
//! - [`backbone`], [`hash`], [`model`]: the encoder and the hash layer
//! - [`srem`]: attention masks and selective region erasing
//! - [`objective`]: the combined loss and its code gradients
//! - [`discrete`], [`trainer`]: the alternating optimisation
//! - [`index`], [`eval`]: Hamming search and retrieval metrics
//! - [`cli`]: the `erasehash` command-line front end

pub mod backbone;
pub mod cli;
mod codec;
pub mod dataset;
pub mod discrete;
pub mod error;
pub mod eval;
pub mod hash;
pub mod index;
pub mod model;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod srem;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
