//! Bias auditing for binary image classifiers through model explanations.
//!
//! The crate injects controlled bias into training compositions, trains
//! classifiers on a frozen convolutional extractor, explains them with
//! Grad-CAM and TCAV, turns explanations into biased/unbiased verdicts and
//! reports group-fairness baselines next to explanation-based metrics.

pub mod annotation;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcam;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tcav;
pub mod training;

pub use error::{Error, Result};
