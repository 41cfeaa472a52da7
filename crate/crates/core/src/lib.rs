//! Core of the BITA image-captioning pipeline.
//!
//! An Interactive Fourier Transformer (IFT) sits between a frozen image
//! encoder and a frozen decoder-only language model. It is trained in two
//! stages: image-text contrastive alignment, then prefix causal language
//! modeling. This crate holds everything that is pure computation: the
//! reverse-mode tensor graph, the Fourier kernels, the model, both losses,
//! decoding, caption metrics, synthetic data and the training loops. File
//! formats and the command line live in the `bita` crate.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod spectral;
pub mod tensor;
pub mod textproc;
pub mod train;

pub use autodiff::{finite_diff_check, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use spectral::MixerKind;
pub use tensor::Tensor;
