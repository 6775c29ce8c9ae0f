//! Learning with noisy labels through contrastive semi-supervised training.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), an
//! MLP encoder with projection and classifier heads ([`models`]), SelfCon and
//! SupCon losses ([`contrastive`]), a MixMatch-style semi-supervised module
//! ([`ssl`]), label-noise tooling with a two-component GMM partition
//! ([`noise`]), synthetic and IDX datasets ([`data`]), evaluation and export
//! helpers ([`metrics`]), and the two training procedures ([`trainers`]):
//! multi-task CSSL for partially labelled data and co-divided CoDiM for noisy
//! labels.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod noise;
pub mod report;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
