//! A desk-scale laboratory for multi-task DPO on a unified token model.
//!
//! The crate pairs a short-sequence text task ("understanding") with a
//! long-sequence discrete-code task ("generation") on one shared trunk with
//! low-rank adapters, and provides:
//!
//! * exact log-probabilities and gradients ([`model`]),
//! * DPO losses, margins and KL to the reference ([`dpo`]),
//! * gradient-interference diagnostics and null calibration ([`diagnostics`]),
//! * the seven task-balancing strategies ([`balancing`]),
//! * seeded synthetic preference data ([`data`]),
//! * AdamW training with post-hoc soups and composites ([`trainer`]),
//! * Welch / one-sample t-tests, Cohen's d and reports ([`stats`], [`report`]),
//! * run orchestration and SVG plots ([`runs`], [`plot`]).

pub mod balancing;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod gradient;
pub mod model;
pub mod optim;
pub mod plot;
pub mod report;
pub mod runs;
pub mod stats;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use gradient::GradientVector;
pub use model::{init_model, Modality, ModelConfig, ModelState, ParamSource, TokenSequence};
