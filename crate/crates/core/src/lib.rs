//! Training and analysis of hypernetworks that sample weight vectors for a
//! fixed target network.
//!
//! A generator `G(z; φ)` maps latent noise `z` to a full weight vector `θ` of
//! a fixed target architecture `T(x; θ)`. Training minimizes
//!
//! ```text
//! L(φ) = λ · E_z E_x [ class_loss(T(x; G(z))) ]  −  H( gauge_fix(G(z)) )
//! ```
//!
//! i.e. an accuracy term plus a diversity term given by the
//! Kozachenko–Leonenko nearest-neighbor entropy of the gauge-fixed generated
//! weights. The crate provides:
//!
//! * [`tensor`] — a minimal reverse-mode automatic-differentiation engine;
//! * [`data`] — MNIST-style IDX ingestion, a synthetic digit corpus, and
//!   Gaussian mixtures for the 2-D toy problem;
//! * [`target`] — the target network: layout, forward pass, losses;
//! * [`gauge`] — gauge fixing of weight-space scaling/bias symmetries;
//! * [`entropy`] — the differentiable nearest-neighbor entropy estimator;
//! * [`hypernet`] — extractor + shared per-layer weight generators;
//! * [`trainer`] — the combined objective, Adam, and the training loop;
//! * [`analysis`] — ensembles, histograms, weight-space paths, PCA,
//!   adversarial sweeps, distillation, toy profiling, filter images;
//! * [`bank`] — the persisted weight-bank container;
//! * [`config`] — experiment configuration parsing;
//! * [`report`] — deterministic CSV/SVG/PGM emission.

pub mod analysis;
pub mod bank;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod gauge;
pub mod hypernet;
pub mod report;
pub mod rng;
pub mod target;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
