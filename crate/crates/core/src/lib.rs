//! Desk-scale laboratory for offline preference optimization with a learned,
//! prompt-dependent utility anchor.
//!
//! The crate is organized bottom-up:
//!
//! * [`grad`]: reverse-mode tape, finite-difference oracle, Adam.
//! * [`policy`]: tabular and tiny token-model policies, KL divergences.
//! * [`anchor`]: implicit rewards and the affine anchor head.
//! * [`objectives`]: all preference losses and batched evaluation.
//! * [`data`]: synthetic worlds, simulated annotators, dataset files.
//! * [`analysis`]: numerical theory checks and anchor diagnostics.
//! * [`config`], [`trainer`], [`eval`], [`compare`], [`metrics`], [`checkpoint`]: the run harness.

pub mod analysis;
pub mod anchor;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod metrics;
pub mod objectives;
pub mod par;
pub mod policy;
pub mod rng;
pub mod stable;
pub mod trainer;

pub use error::{LabError, Result};
