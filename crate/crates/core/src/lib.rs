//! Semi-supervised domain adaptation for feature-vector classification.
//!
//! A labeled source domain and an unlabeled target domain are mapped through
//! a shared two-layer extractor. Training minimises the source cross-entropy
//! plus a marginal MMD term and a class-conditional MMD term computed on
//! confidence-filtered pseudo-labels, with the two alignment weights driven
//! by per-epoch schedules.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`features`] | band-limited differential-entropy features from raw windows |
//! | [`kernel`] | Gaussian kernel, median bandwidth, MMD and CMMD with gradients |
//! | [`net`] | extractor, classifier, composite loss, backward pass |
//! | [`schedule`] | α, β, confidence threshold and learning-rate schedules |
//! | [`trainer`] | pseudo-labels, momentum SGD and the training loop |
//! | [`eval`] | leave-one-subject-out protocols, metrics, ablation variants |
//! | [`dataset`], [`synth`], [`config`], [`checkpoint`] | file formats and generators |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod kernel;
pub mod net;
pub mod pseudo;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{Metrics, Protocol, ProtocolSummary, Variant};
pub use kernel::{KernelConfig, SigmaMode};
pub use net::{LossBreakdown, ModelParams, NetShape};
pub use schedule::{ScheduleConfig, ScheduleState};
pub use trainer::{TrainConfig, TrainOutcome};
