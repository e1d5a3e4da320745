//! Separability-and-alignment training for multi-domain binary classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense matrices, stable primitives, seeded RNG streams and a
//!   finite-difference gradient checker.
//! - [`worldgen`]: synthetic multi-domain live/spoof worlds, leave-one-domain-out
//!   splits and CSV I/O.
//! - [`encoder`]: an MLP feature map with an L2-normalised head, hand-written
//!   backward pass and SGD with weight decay.
//! - [`losses`]: per-domain risk, supervised contrastive loss, the combined
//!   objective and the IRM-v1 penalty baseline.
//! - [`pgirm`]: per-domain hyperplanes and the projected-gradient alignment update.
//! - [`metrics`]: AUC / HTER / TPR@FPR and the separability / alignment scores.
//! - [`trainer`]: the training loop, ablation arms, evaluation protocol and sweeps.

pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numkit;
pub mod pgirm;
pub mod trainer;
pub mod worldgen;

pub use error::{Error, Result};
