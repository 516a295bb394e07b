//! Anchored hidden-state mixup for out-of-distribution regression.
//!
//! The crate bundles a small reverse-mode autodiff engine, split
//! feature-extractor/head models, the anchored penalty and mixup baselines,
//! rotation-MNIST dataset construction, and a dual-loader trainer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod datasets;
pub mod experiment;
pub mod models;
pub mod regularizers;
pub mod trainer;
