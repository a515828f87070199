//! A single radiance field for stratified scenes.
//!
//! A stratified scene is organized as nested levels (outer shell, interior,
//! innermost object), each captured from its own camera shell. This crate
//! trains one radiance field over all levels at once by conditioning the
//! field on vector-quantized latent codes, and ships everything needed to
//! exercise that idea end to end on a desk-scale budget:
//!
//! - [`autodiff`]: reverse-mode automatic differentiation over dense tensors
//! - [`encoding`]: frequency / integrated positional encodings and the
//!   unbounded-scene contraction
//! - [`field`]: the radiance field, latent generator (codebook + encoder +
//!   decoder), latent router, and ablation variants
//! - [`rendering`]: rays, stratified + hierarchical sampling, differentiable
//!   volume rendering
//! - [`scenegen`]: analytic ray-traced nested-primitive datasets
//! - [`training`]: loss assembly, Adam, the training loop, checkpoints
//! - [`metrics`]: PSNR / SSIM and level-wise evaluation reports
//! - [`cli`]: the `strata` command-line entry point

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod encoding;
pub mod error;
pub mod field;
pub mod image_io;
pub mod metrics;
pub mod rendering;
pub mod scenegen;
pub mod training;

pub use error::{Error, Result};
