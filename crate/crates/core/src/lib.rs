//! Anatomy-preserving motion representation and a desk-scale diffusion
//! autoencoder for attribute manipulation of marker-based motion capture.
//!
//! The crate is organized bottom-up:
//!
//! - [`motion`]: sequences, manifests, file formats, foot contacts and a
//!   synthetic articulated-motion generator.
//! - [`preprocess`]: decimation, outlier statistics, spatial normalization,
//!   mirroring and wand-marker centering.
//! - [`pose`]: the reversible mapping between marker coordinates and
//!   per-link 6D (Stiefel) rotation features.
//! - [`diffusion`]: noise schedules, forward noising, strided DDIM reverse
//!   steps and the deterministic stochastic encoder.
//! - [`autograd`]: a small reverse-mode tape over dense matrices.
//! - [`network`]: semantic encoder, x0-predicting denoiser, losses,
//!   training and checkpoints.
//! - [`manipulate`]: the linear attribute head and guided manipulation.
//! - [`evaluate`]: separability metrics, Fréchet distance and projections.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
mod binio;
pub mod diffusion;
pub mod error;
pub mod evaluate;
pub mod manipulate;
pub mod motion;
pub mod network;
pub mod pose;
pub mod preprocess;

pub use error::{Error, Result};
