//! Hierarchical instance features for Gaussian splat scenes.
//!
//! The pipeline learns a low-dimensional instance feature per Gaussian from
//! inconsistent multi-view, multi-scale masks:
//!
//! 1. [`forest`] refines each view's mask levels into containment-consistent
//!    object trees.
//! 2. [`render`] splats features into images; [`loss`] scores them with
//!    prototype pull/push terms whose gradients flow back to the points.
//! 3. [`train`] runs a global stage on the coarsest masks, then local stages
//!    per cluster, with [`csd`] deciding per view which local terms apply.
//! 4. [`cluster`] builds the learned object tree by k-means in a joint
//!    feature/position space, and [`denoise`] cleans every cluster.
//!
//! [`synth`] generates scenes with known hierarchies and [`metrics`] scores
//! the result.

pub mod cluster;
pub mod config;
pub mod csd;
pub mod denoise;
pub mod error;
pub mod forest;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod query;
pub mod render;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scene::{FeatureMap, GaussianPoint, GroundTruth, Intrinsics, LabelMap, Scene, View};
