//! Beta-VAE classifiers with magnitude pruning.
//!
//! The crate bundles everything needed to train a convolutional Beta-VAE
//! with an attached classifier head (or a plain CNN classifier), remove the
//! reconstruction head, prune the remaining kernels to a constant sparsity,
//! fine-tune under the mask, and report test accuracy next to the
//! DEFLATE-compressed size of the inference model.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`nn`]: parameter registry, architectures, initialization, Adam.
//! - [`betavae`]: encoder, reparameterization, decoder, KL and reconstruction terms.
//! - [`classifier`]: classifier head, cross-entropy, the combined objective, model assembly.
//! - [`pruning`]: low-magnitude masks and masked optimizer steps.
//! - [`data`]: MNIST IDX and CIFAR-10 binary loaders, shuffling, batching.
//! - [`experiment`]: the train / decapitate / prune / fine-tune protocol and its reports.
//! - [`verify`]: self-contained oracle suites shared by the tests and the CLI.

pub mod betavae;
pub mod classifier;
pub mod data;
mod error;
pub mod experiment;
pub mod nn;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
