//! Multi-task apparent-affect prediction under age-group domain shift.
//!
//! The crate trains a shared backbone to predict a categorical emotion
//! (8 classes) together with continuous valence and arousal in [-1, 1],
//! and measures how well that model transfers to an age group it never
//! saw during training. Five update rules are provided: plain pooled
//! ERM, inter-domain mixup, an MMD feature alignment penalty, CDANN
//! adversarial domain confusion, and MLDG meta-learning.
//!
//! Entry points, roughly in the order a new reader should visit them:
//!
//! - [`data`]: sample/domain types, manifest loading, synthetic data.
//! - [`metrics`]: the composite loss and its pieces (CE, MSE, PCC, CCC),
//!   plus the multi-kernel MMD statistic.
//! - [`backbone`]: the reference network (MLP or small conv stack) and
//!   checkpoint serialisation.
//! - [`algorithms`]: the five update rules over a common step interface.
//! - [`harness`]: leave-one-domain-out protocol, budget equalisation,
//!   model selection, and the domain-subset ablation.
//! - [`report`]: evaluation and the table layouts used for reporting.
//! - [`cli`]: the `agedg` command-line front end.
//!
//! Runnable walkthroughs live in `examples/`; start with
//! `examples/train_erm.rs`.

pub mod algorithms;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod report;

pub use error::{AgedgError, Result};
