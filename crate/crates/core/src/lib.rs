//! One-shot distributed maximum-likelihood estimation.
//!
//! Local models are fit independently on data partitions and combined once at a
//! fusion center. This crate provides:
//!
//! * [`expfam`] — canonical full exponential families with exact moment-map
//!   machinery, MLE, and sampling;
//! * [`curved`] — curved exponential families (lower-dimensional embeddings),
//!   Fisher information, and statistical curvature;
//! * [`combine`] — combination rules for local fits: linear averaging, exact
//!   and numerical KL averaging, and parametric-bootstrap KL averaging;
//! * [`theory`] — closed-form asymptotic bias/MSE predictions, tangent-space
//!   projections, and Wishart moment utilities;
//! * [`gmm`] — Gaussian mixture estimation via EM plus naive/matched linear
//!   averaging and Monte-Carlo KL averaging of mixtures;
//! * [`harness`] — a reproducible, seeded experiment harness with CSV/JSON
//!   output.

pub mod combine;
pub mod curved;
pub mod error;
pub mod expfam;
pub mod gmm;
pub mod harness;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
