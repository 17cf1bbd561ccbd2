//! Multitask breast-ultrasound CAD pipeline.
//!
//! The crate trains and evaluates a convolutional network that concurrently
//! predicts, for one B-mode breast ultrasound image:
//!
//! - the five BI-RADS descriptors (shape, orientation, margin, echo pattern,
//!   posterior features) plus the four not-circumscribed margin sub-types,
//! - a continuous likelihood of malignancy tied to the BI-RADS assessment
//!   categories, and
//! - the benign/malignant tumor class.
//!
//! All eleven outputs share one convolutional encoder, so the tumor-class
//! decision is explained by the descriptor predictions that were learned from
//! the same feature maps. A synthetic phantom generator ([`phantom`]) renders
//! label-consistent ultrasound-like images so the whole pipeline can be
//! exercised end to end without clinical data.
//!
//! Module map:
//!
//! - [`lexicon`] — BI-RADS vocabulary, category/likelihood mapping, target encoding
//! - [`dataset`] — manifest CSV loading and stratified cross-validation splits
//! - [`preprocess`] — cropping, resizing, channel synthesis, augmentation
//! - [`phantom`] — synthetic BUS-like image generation with consistent labels
//! - [`model`] — the shared-encoder multitask network and checkpoints
//! - [`objective`] — per-task losses, the agreement term, and the weighted total
//! - [`training`] — Adam loop, plateau LR schedule, early stopping, CV driver
//! - [`evaluation`] — metrics, ablation harness, per-image explanation reports

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod lexicon;
pub mod model;
pub mod nn;
pub mod objective;
pub mod phantom;
pub mod preprocess;
pub mod training;
pub(crate) mod util;

pub use error::{Error, Result};
pub use util::Scalar;
