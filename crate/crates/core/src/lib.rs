//! Out-of-distribution detection from subspace projections of a network's
//! penultimate features.
//!
//! A classifier is trained against fixed, evenly spread class centroids
//! (PEDCC-Loss) with a penalty keeping the first fully connected layer's
//! weight vectors independent. Each sample is then scored by
//!
//! * the cosine between the last feature vector `f_m` and its projection on
//!   the column span of the FC weights,
//! * the decomposition of its centroid cosines into an angle to the centroid
//!   subspace and angles inside it,
//! * the norm of the FC output `f_n`,
//!
//! and the four metrics are fused by a secondary classifier whose ID-class
//! probability is the final score.

mod binio;

pub mod centroids;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod scoring;

pub use error::{Error, Result};
