//! Adversarial membership manipulation for image classifiers.
//!
//! The crate covers the full loop of a membership audit under attack:
//!
//! * [`nn`], [`train`], [`split`], [`data`]: classifiers with exact input
//!   gradients, SGD training of targets and shadow ensembles, membership splits.
//! * [`mia`]: loss, Attack R, LiRA and RMIA statistics and the threshold rule.
//! * [`fabrication`]: confidence-ascent member fabrication (momentum plus cosine
//!   step decay), inverted adversarial baselines and a gradient-penalized
//!   adaptive variant.
//! * [`geometry`]: input-gradient norms (exact and finite-difference),
//!   Mahalanobis and LID feature scores, and the quadratic-model step bound for
//!   signed descent.
//! * [`defense`]: gradient-norm fabrication detection and tanh-weighted robust
//!   statistics.
//! * [`games`]: executable security games producing labeled score records.
//! * [`metrics`]: ROC, AUC, TPR at fixed FPR, EER, TNR-TPR curves and Error Area.

pub mod data;
pub mod defense;
pub mod error;
pub mod fabrication;
pub mod games;
pub mod geometry;
pub mod metrics;
pub mod mia;
pub mod nn;
pub mod seed;
pub mod split;
pub mod train;

pub use data::{Dataset, LabeledExample, Shape};
pub use error::{Error, Result};
pub use nn::{Activation, ArchSpec, Classifier};
pub use split::{MembershipSplit, SplitConfig};
pub use train::{ShadowEnsemble, TrainConfig};
