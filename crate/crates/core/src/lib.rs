//! Token-growth training acceleration for small vision transformers.
//!
//! Training a vision transformer on all of its input tokens from the first
//! iteration is wasteful: early in training the model extracts coarse
//! features, and a well-chosen subset of tokens carries most of the signal.
//! This crate implements a staged *initialize → expand → merge* pass over the
//! token sequence:
//!
//! 1. **Initialize** — pick an evenly strided subset of tokens at a small
//!    initial keep rate.
//! 2. **Expand** — grow the subset stage by stage with a farthest-distribution
//!    rule: repeatedly add the unselected tokens whose feature distributions
//!    are farthest from everything already selected. A parallel top-k variant
//!    splits each stage's additions into a fixed number of rounds.
//! 3. **Merge** — fold every unselected token into its nearest selected token
//!    by unweighted averaging, so no input information is dropped outright.
//!
//! The kept-token rate grows linearly over a fixed number of stages and
//! reaches 1.0 in the final stage, where the pass degenerates to the identity
//! and training continues on the full sequence.
//!
//! The crate bundles everything needed to demonstrate the method end to end:
//!
//! - [`tokens`], [`distance`], [`schedule`], [`pipeline`] — the core
//!   selection/merge machinery and its growth schedule.
//! - [`flops`] — analytic FLOPs accounting for transformer geometries and the
//!   resulting training-cost ratios.
//! - [`autodiff`], [`vit`], [`optim`], [`data`], [`trainer`] — a minimal
//!   trainable vision transformer with reverse-mode autodiff, a deterministic
//!   training loop, and synthetic data.
//! - [`config`] — TOML run configuration shared by the CLI.
//!
//! All randomness is seeded explicitly; repeated runs with the same seed
//! produce byte-identical metrics.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod distance;
pub mod error;
pub mod flops;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod schedule;
pub mod tokens;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
