//! Semi-supervised singing voice synthesis with dual classifier-free
//! diffusion guidance.
//!
//! The crate covers the whole desk-scale pipeline: score-label parsing and
//! frame alignment ([`labelkit`]), mel/F0 front-end ([`audiofeat`]), the
//! conditional score estimator ([`model`]), the VP diffusion process and its
//! reverse-time samplers ([`diffusion`]), guided score combination
//! ([`guidance`]), an analytic Gaussian-mixture oracle ([`oracle`]),
//! objective metrics ([`evalkit`]) and the file-level pipeline driven by
//! [`config::RunConfig`] ([`pipeline`]).

pub mod audiofeat;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod guidance;
pub mod labelkit;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod study;
pub mod synth;

pub use error::{Error, Result};
