//! Tracking-by-detection for 3D point-cloud sequences with a learned
//! pairwise affinity network.
//!
//! Pipeline: detections are admitted by confidence ([`ingest`]), the points
//! inside each box are cropped into the box frame ([`crop`]), a PointNet-lite
//! encoder turns every crop into a feature ([`featurize`]), all
//! previous/current pairs are scored ([`affinity`]), and an optimal
//! assignment links the detections into tracks ([`association`]).
//! [`loss`] and [`train`] fit the scoring network; [`synth`] and [`metrics`]
//! supply ground truth and CLEAR-MOT evaluation.

pub mod affinity;
pub mod association;
pub mod cli;
pub mod crop;
pub mod error;
pub mod featurize;
pub mod geometry;
pub mod ingest;
pub mod losscheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
