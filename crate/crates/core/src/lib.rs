//! Multi-modal retinal image registration.
//!
//! The pipeline turns a [`features::DenseFeatureMap`] (two detector logits and
//! a descriptor per stride-4 cell) into keypoints, matches them across images
//! by mutual nearest neighbour and fits a homography with RANSAC. The feature
//! maps come either from the deterministic reference extractor in
//! [`features`] or from any external network written in the `DFMP`
//! interchange format.
//!
//! [`losses`] holds the training objective (BCE detector loss plus the
//! bidirectional quadruplet descriptor loss with in-batch hard negatives) and
//! a small trainable embedder; [`metrics`] holds the evaluation suite.

// `!(x > 0.0)` is used on purpose so NaN config values are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod features;
pub mod geometry;
pub mod grid;
pub mod keypoints;
pub mod losses;
pub mod matching;
pub mod metrics;
pub(crate) mod numeric;

pub use error::{Error, Result};
pub use geometry::{Correspondence, Homography, Point2};
pub use numeric::derive_seed;
