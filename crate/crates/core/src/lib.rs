//! Deep joint source-channel coding of images with an iterative,
//! denoiser-regularized decoder.
//!
//! The crate provides:
//!
//! - [`channel`]: additive Gaussian/Laplace channel simulation with exact
//!   SNR accounting and reproducible noise substreams;
//! - [`models`]: fully-convolutional encoder/decoder pairs with power-bounded
//!   codewords, plus a bias-free codeword denoiser, all with hand-rolled
//!   reverse-mode gradients;
//! - [`training`]: joint encoder/decoder optimization under simulated channel
//!   noise and denoiser training on corrupted codewords;
//! - [`isec`]: the iterative codeword-refinement decoder combining the
//!   channel-likelihood gradient with the denoiser's implicit prior;
//! - [`metrics`]: PSNR / SSIM / MS-SSIM and a plug-in hook for external
//!   perceptual metrics;
//! - [`data`]: dataset ingestion (CIFAR-10 binaries, image folders, seeded
//!   synthetic fields) and pre/post-processing;
//! - [`experiments`]: a config-driven harness producing CSV reports,
//!   run manifests, and optional SVG plots.

pub mod channel;
pub mod data;
pub mod error;
pub mod experiments;
pub mod isec;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
pub use signal::{Codeword, SourceImage};
