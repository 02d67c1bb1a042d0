//! Weakly supervised region detectors and sequential search agents.
//!
//! The crate has two halves. The first learns a region confidence function
//! from bag-level supervision: [`miltrain`] alternates a linear SVM
//! ([`svm`]) with a constrained relabeling step that uses the topological
//! region sets from [`geometry`]. The second trains a saccade-and-fixate
//! search agent ([`agent`]) with the likelihood-ratio policy gradient
//! ([`reinforce`]) so that detection only evaluates part of the region pool.
//! [`dataset`] provides the synthetic scenes both halves run on and
//! [`eval`] scores the results.

pub mod agent;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod miltrain;
pub mod pipeline;
pub mod reinforce;
pub mod rng;
pub mod svm;

pub use error::{Error, Result};
pub use geometry::{Rect, RegionId};
