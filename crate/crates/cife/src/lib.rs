//! Category-invariant feature enhancement (CIFE) for adversarial domain
//! adaptation, runnable end-to-end on synthetic domain-shift tasks.
//!
//! The crate is organized bottom-up:
//! - [`autodiff`]: dense tensors, a reverse-mode tape, and the
//!   gradient-reversal primitive.
//! - [`nn`]: linear layers, initialization, SGD with momentum, and the
//!   learning-rate / adversarial-weight schedules.
//! - [`models`]: the five-component dual adversarial model, the baseline
//!   adversarial model, all loss terms, and the concatenation-based
//!   prediction forward pass.
//! - [`data`]: synthetic domain-shift generators with a latent Bayes oracle,
//!   batch sampling, and a binary dataset format.
//! - [`training`]: the alternating / reversal training loop, target
//!   prediction with random source draws, and replicate aggregation.
//! - [`probes`]: proxy A-distance, ideal-joint-hypothesis adaptability,
//!   frozen-feature probes, and the lambda_c sensitivity sweep.
//! - [`config`]: flat key=value experiment configuration for the CLI.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod models;
pub mod nn;
pub mod probes;
pub mod training;
