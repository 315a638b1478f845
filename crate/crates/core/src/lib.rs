//! Attention-guided automatic layer freezing at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] - a small deterministic feed-forward engine whose backward pass
//!   honours a [`nn::FreezeMask`].
//! * [`cost`] - FLOPs and activation-memory accounting under a mask.
//! * [`cka`] - linear CKA, stabilisation detection and freeze labels.
//! * [`tailor`] - fixed-size weight subsampling and per-unit history windows.
//! * [`predictor`] - the single-head attention freeze predictor and its
//!   offline trainer.
//! * [`policies`] - predictor-driven, linear, gradient-norm and full-training
//!   freezing policies.
//! * [`dataset_gen`] - CKA-labelled predictor dataset generation.
//! * [`tasks`], [`config`], [`experiment`], [`report`] - the experiment harness.

pub mod cka;
pub mod config;
pub mod container;
pub mod cost;
pub mod dataset_gen;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod nn;
pub mod policies;
pub mod predictor;
pub mod report;
pub mod tailor;
pub mod tasks;
pub mod train;

pub use error::{FrzError, Result};
