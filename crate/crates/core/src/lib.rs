//! Divide-and-conquer deep imbalanced regression.
//!
//! The label range is cut into ordinal groups. A shared encoder is trained
//! with a group-aware contrastive loss, a classifier predicts the group using
//! symmetric descending soft labels, and one expert regressor per group
//! produces the final value. At training time each sample goes through the
//! expert of its true group; at test time through the expert the classifier
//! picks.
//!
//! Modules:
//!
//! - [`grouping`]: label-to-group mapping, histograms, shot categories, LDS
//! - [`softlabel`]: soft targets, soft CE, CE and logit-adjusted CE
//! - [`contrastive`]: ordinal group-aware contrastive loss and gradient
//! - [`model`]: encoder / classifier / experts with manual backprop
//! - [`training`]: final objective, Adam, training loop, prediction
//! - [`eval`]: MAE, GM, b-MAE, Pearson, group diagnostics, reports
//! - [`datagen`]: synthetic skewed datasets and the CSV format
//! - [`experiment`]: one-shot runs, seed medians, run-level parallelism
//! - [`checkpoint`]: model checkpoint files
//! - [`cli`]: command implementations behind the `groupdir` binary

pub mod checkpoint;
pub mod cli;
pub mod contrastive;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grouping;
pub mod linalg;
pub mod model;
pub mod softlabel;
pub mod training;

pub use error::{Error, Result};
